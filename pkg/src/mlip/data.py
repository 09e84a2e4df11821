"""Synthetic paired image/text data with hidden class labels.

Every sample of class ``k`` draws its caption words uniformly from class
``k``'s vocabulary.  Its image is ``template_k + patch_noise * xi`` where the
Gaussian perturbation ``xi`` is the (scaled) sum of the caption words' random
codes, repeated on every patch, plus independent per-patch jitter.  The pairing
is therefore recoverable from both modalities.  Neighbouring classes share a
fraction of their vocabulary, producing cross-class near-duplicates.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .config import Config

CLS_TOKEN = 0


@dataclass
class PairedDataset:
    patches: np.ndarray  # (N, M^2, d_in)
    tokens: np.ndarray  # (N, V)
    labels: np.ndarray  # (N,) hidden, evaluation only
    train_idx: np.ndarray
    test_idx: np.ndarray
    templates: np.ndarray  # (K, M^2, d_in)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "PairedDataset":
        idx = np.asarray(idx)
        return PairedDataset(
            self.patches[idx],
            self.tokens[idx],
            self.labels[idx],
            np.arange(len(idx)),
            np.arange(0),
            self.templates,
        )

    def test(self) -> "PairedDataset":
        return self.subset(self.test_idx)

    def save(self, out_dir: Union[str, Path]) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "dataset.npz"
        np.savez(
            path,
            patches=self.patches,
            tokens=self.tokens,
            labels=self.labels,
            train_idx=self.train_idx,
            test_idx=self.test_idx,
            templates=self.templates,
        )
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PairedDataset":
        path = Path(path)
        if path.is_dir():
            path = path / "dataset.npz"
        with np.load(path) as z:
            return cls(*(z[k] for k in ("patches", "tokens", "labels", "train_idx", "test_idx", "templates")))


def class_vocabularies(cfg: Config) -> np.ndarray:
    """``(K, tokens_per_class)`` token ids; consecutive classes overlap."""
    base = 1 + cfg.vocab_stride * np.arange(cfg.class_count)
    return base[:, None] + np.arange(cfg.tokens_per_class)[None, :]


def generate_dataset(cfg: Config) -> PairedDataset:
    rng = np.random.default_rng(cfg.data_seed)
    K, n_per = cfg.class_count, cfg.samples_per_class
    M2, din, V = cfg.patches, cfg.patch_dim, cfg.seq_len
    templates = rng.standard_normal((K, M2, din))
    codes = rng.standard_normal((cfg.vocab_size, din))
    vocab = class_vocabularies(cfg)

    N = K * n_per
    labels = np.repeat(np.arange(K), n_per)
    tokens = np.empty((N, V), dtype=np.int64)
    tokens[:, 0] = CLS_TOKEN
    picks = rng.integers(0, cfg.tokens_per_class, size=(N, V - 1))
    tokens[:, 1:] = vocab[labels[:, None], picks]
    # caption code sum, shared by every patch; unit variance per coordinate
    signal = codes[tokens[:, 1:]].sum(axis=1) / np.sqrt(V - 1)
    jitter = rng.standard_normal((N, M2, din))
    patches = templates[labels] + cfg.patch_noise * (signal[:, None, :] + cfg.patch_jitter * jitter)

    train, test = [], []
    for k in range(K):
        idx = rng.permutation(np.flatnonzero(labels == k))
        cut = int(round(cfg.train_fraction * len(idx)))
        train.append(idx[:cut])
        test.append(idx[cut:])
    return PairedDataset(
        patches=patches,
        tokens=tokens,
        labels=labels,
        train_idx=np.sort(np.concatenate(train)),
        test_idx=np.sort(np.concatenate(test)),
        templates=templates,
    )
