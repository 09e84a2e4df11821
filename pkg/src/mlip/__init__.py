"""Multi-level image-text contrastive pre-training on synthetic paired data.

Global, local (token-knowledge-patch) and knowledge-guided category-level
contrastive losses, plus matching and text-swapping proxy tasks, trained with
a small numpy autodiff engine.
"""

from .config import Config, load_config
from .data import PairedDataset, generate_dataset
from .evaluate import evaluate
from .model import MLIPModel
from .train import train

__all__ = ["Config", "load_config", "PairedDataset", "generate_dataset", "evaluate", "MLIPModel", "train"]
__version__ = "0.1.0"
