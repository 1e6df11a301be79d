"""Procedural generation of biased datasets with a known bias structure.

Every sample carries a class label ``y`` and (optionally) a bias label
``b``. During generation, ``b`` equals ``y`` with probability ``1 - rho``
(bias-aligned) and is uniform over the remaining classes otherwise
(bias-conflicting), so the exact conditional is
P(y=c | b=c) = 1 - rho and P(y=c' | b=c) = rho / (C - 1).
An unbiased split (b independent of y) is the special case
rho = (C - 1) / C.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

KINDS = ("two-factor", "colored-glyphs")

GLYPH_SIDE = 16
PALETTE_SIZE = 10


@dataclass
class GenConfig:
    num_classes: int
    n: int
    bc_ratio: float
    sigma_u: float = 0.5
    sigma_b: float = 0.1
    seed: int = 0
    kind: str = "two-factor"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if not 0.0 < self.bc_ratio < 1.0:
            raise ValueError(f"bc_ratio must be in (0,1), got {self.bc_ratio}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.kind == "colored-glyphs" and self.num_classes > PALETTE_SIZE:
            raise ValueError(f"colored-glyphs supports at most {PALETTE_SIZE} classes")


@dataclass
class LabeledDataset:
    features: np.ndarray          # (N, D) float64
    labels: np.ndarray            # (N,) int64 in [0, C)
    num_classes: int
    bias: np.ndarray | None = None      # (N,) int64 in [0, C)
    aligned: np.ndarray | None = None   # (N,) bool, aligned[n] == (bias[n] == labels[n])
    cfg: GenConfig | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise ValueError("labels length mismatch")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite feature values")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.int64)
            if self.bias.shape != (n,):
                raise ValueError("bias length mismatch")
            expected = self.bias == self.labels
            if self.aligned is None:
                self.aligned = expected
            else:
                self.aligned = np.asarray(self.aligned, dtype=bool)
                if not np.array_equal(self.aligned, expected):
                    raise ValueError("aligned flags inconsistent with bias == label")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(
            features=self.features[idx],
            labels=self.labels[idx],
            num_classes=self.num_classes,
            bias=None if self.bias is None else self.bias[idx],
            aligned=None if self.aligned is None else self.aligned[idx],
            cfg=self.cfg,
        )


@dataclass
class EmpiricalConditional:
    """Nonparametric estimate of p(y|b): table[y, b], columns sum to 1."""

    table: np.ndarray   # (C, C) float64
    counts: np.ndarray  # (C, C) int64


def _draw_labels_and_bias(cfg: GenConfig, rng: np.random.Generator):
    c, n, rho = cfg.num_classes, cfg.n, cfg.bc_ratio
    y = rng.integers(0, c, size=n)
    conflict = rng.random(n) < rho
    b = y.copy()
    # uniform over the other C-1 classes for conflicting samples
    offsets = rng.integers(1, c, size=n)
    b[conflict] = (y[conflict] + offsets[conflict]) % c
    return y.astype(np.int64), b.astype(np.int64)


def generate_two_factor(cfg: GenConfig) -> LabeledDataset:
    """Concatenated noisy one-hots: [onehot(y) + N(0, sigma_u^2) | onehot(b) + N(0, sigma_b^2)]."""
    rng = np.random.default_rng(cfg.seed)
    y, b = _draw_labels_and_bias(cfg, rng)
    c, n = cfg.num_classes, cfg.n
    x = np.zeros((n, 2 * c))
    x[np.arange(n), y] = 1.0
    x[np.arange(n), c + b] = 1.0
    x[:, :c] += rng.normal(0.0, cfg.sigma_u, size=(n, c))
    x[:, c:] += rng.normal(0.0, cfg.sigma_b, size=(n, c))
    return LabeledDataset(x, y, num_classes=c, bias=b, cfg=cfg)


def color_palette(k: int = PALETTE_SIZE) -> np.ndarray:
    """k hue-equispaced fully saturated RGB colors."""
    return np.array([colorsys.hsv_to_rgb(i / k, 1.0, 1.0) for i in range(k)])


def glyph_masks() -> np.ndarray:
    """Ten fixed 16x16 binary glyphs, one per class. Pure functions of pixel coords."""
    s = GLYPH_SIDE
    yy, xx = np.mgrid[0:s, 0:s]
    cy = cx = (s - 1) / 2.0
    masks = np.zeros((PALETTE_SIZE, s, s), dtype=bool)
    border = (yy >= 2) & (yy < s - 2) & (xx >= 2) & (xx < s - 2)
    inner = (yy >= 5) & (yy < s - 5) & (xx >= 5) & (xx < s - 5)
    masks[0] = border & ~inner                                  # square ring
    masks[1] = (xx >= 6) & (xx < 10)                            # vertical bar
    masks[2] = (yy >= 6) & (yy < 10)                            # horizontal bar
    masks[3] = np.abs(yy - xx) <= 1                             # diagonal
    masks[4] = np.abs(yy + xx - (s - 1)) <= 1                   # anti-diagonal
    masks[5] = ((xx >= 6) & (xx < 10)) | ((yy >= 6) & (yy < 10))  # cross
    masks[6] = ((yy // 4) + (xx // 4)) % 2 == 0                 # checkerboard
    masks[7] = (yy - cy) ** 2 + (xx - cx) ** 2 <= 5.5 ** 2      # disk
    masks[8] = yy < s // 2                                      # top half
    masks[9] = xx < s // 2                                      # left half
    return masks


def generate_colored_glyphs(cfg: GenConfig) -> LabeledDataset:
    """16x16 RGB images: class glyph in white on a bias-colored background."""
    rng = np.random.default_rng(cfg.seed)
    y, b = _draw_labels_and_bias(cfg, rng)
    n = cfg.n
    palette = color_palette()
    masks = glyph_masks()
    img = np.empty((n, GLYPH_SIDE, GLYPH_SIDE, 3))
    img[:] = palette[b][:, None, None, :]
    img += rng.normal(0.0, cfg.sigma_b, size=img.shape)
    glyph = 1.0 + rng.normal(0.0, cfg.sigma_u, size=img.shape)
    sel = masks[y][..., None]
    img = np.where(sel, glyph, img)
    np.clip(img, 0.0, 1.0, out=img)
    return LabeledDataset(img.reshape(n, -1), y, num_classes=cfg.num_classes,
                          bias=b, cfg=cfg)


def generate(cfg: GenConfig) -> LabeledDataset:
    if cfg.kind == "two-factor":
        return generate_two_factor(cfg)
    return generate_colored_glyphs(cfg)


def unbiased_config(cfg: GenConfig, n: int, seed: int) -> GenConfig:
    """Config for a test split where b is independent of y (uniform)."""
    c = cfg.num_classes
    return replace(cfg, n=n, seed=seed, bc_ratio=(c - 1) / c)


def estimate_p_y_given_b(ds: LabeledDataset) -> EmpiricalConditional:
    if ds.bias is None:
        raise ValueError("dataset has no bias labels; cannot condition on b")
    c = ds.num_classes
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (ds.labels, ds.bias), 1)
    col = counts.sum(axis=0)
    if np.any(col == 0):
        missing = np.flatnonzero(col == 0).tolist()
        raise ValueError(f"cannot condition: bias value(s) {missing} never occur")
    return EmpiricalConditional(table=counts / col, counts=counts)


def split(ds: LabeledDataset, train_fraction: float, seed: int):
    """Disjoint (train, test) partition under a seeded shuffle."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0,1)")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(n * train_fraction))
    if cut == 0 or cut == n:
        raise ValueError("degenerate split: one side is empty")
    return ds.subset(perm[:cut]), ds.subset(perm[cut:])


# --- serialization: meta.json + data.f64le (little-endian doubles) ---------

def save_dataset(ds: LabeledDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    columns = ["features", "labels"]
    blocks = [ds.features.ravel(), ds.labels.astype(np.float64)]
    if ds.bias is not None:
        columns += ["bias", "aligned"]
        blocks += [ds.bias.astype(np.float64), ds.aligned.astype(np.float64)]
    meta = {
        "schema_version": 1,
        "n": len(ds),
        "feature_dim": ds.dim,
        "num_classes": ds.num_classes,
        "columns": columns,
    }
    if ds.cfg is not None:
        meta["gen"] = {
            "num_classes": ds.cfg.num_classes, "n": ds.cfg.n,
            "bc_ratio": ds.cfg.bc_ratio, "sigma_u": ds.cfg.sigma_u,
            "sigma_b": ds.cfg.sigma_b, "seed": ds.cfg.seed, "kind": ds.cfg.kind,
        }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    data = np.concatenate(blocks).astype("<f8")
    (out / "data.f64le").write_bytes(data.tobytes())


def load_dataset(in_dir: str | Path) -> LabeledDataset:
    src = Path(in_dir)
    meta = json.loads((src / "meta.json").read_text())
    n, d = meta["n"], meta["feature_dim"]
    raw = np.frombuffer((src / "data.f64le").read_bytes(), dtype="<f8").astype(np.float64)
    pos = 0

    def take(count):
        nonlocal pos
        block = raw[pos:pos + count]
        pos += count
        return block

    features = take(n * d).reshape(n, d)
    labels = take(n).astype(np.int64)
    bias = aligned = None
    if "bias" in meta["columns"]:
        bias = take(n).astype(np.int64)
        aligned = take(n).astype(bool)
    cfg = None
    if "gen" in meta:
        g = meta["gen"]
        cfg = GenConfig(num_classes=g["num_classes"], n=g["n"], bc_ratio=g["bc_ratio"],
                        sigma_u=g["sigma_u"], sigma_b=g["sigma_b"], seed=g["seed"],
                        kind=g["kind"])
    return LabeledDataset(features, labels, num_classes=meta["num_classes"],
                          bias=bias, aligned=aligned, cfg=cfg)
