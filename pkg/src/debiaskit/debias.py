"""Weight computation and bias-mitigation strategies.

Two families of training-time corrections:

* per-sample weights (inverse conditional probability, amplified-classifier
  confidence, loss ratio, gradient norm, generative posterior), consumed by
  loss weighting (LW), annealed loss weighting (ALW), or weighted sampling
  with replacement (WS);
* target adjustment (TBA): the classifier's logits are shifted by the log
  of the per-class bias conditional before the cross-entropy.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .classifier import (GceConfig, MlpParams, TrainConfig, _forward_graph,
                         init_mlp, log_softmax_numpy, mlp_final_hidden,
                         mlp_forward, shuffle_batches, softmax_numpy,
                         softmax_xent, steps_per_epoch, train,
                         weighted_mean_loss)
from .data import LabeledDataset, estimate_p_y_given_b
from .metrics import MetricsRow, debias_bc_ratio, evaluate_accuracy

SCHEMES = ("vanilla", "oracle-ub", "oracle-yb", "biased-confidence",
           "lff", "pgd", "vcae")
METHODS = ("LW", "ALW", "WS", "TBA")

# scheme -> methods it can drive
_COMPATIBLE = {
    "vanilla": {"LW", "ALW", "WS"},
    "oracle-ub": {"LW", "ALW", "WS", "TBA"},
    "oracle-yb": {"LW", "ALW", "WS", "TBA"},
    "biased-confidence": {"LW", "ALW", "WS", "TBA"},
    "lff": {"LW"},
    "pgd": {"WS"},
    "vcae": {"LW", "ALW", "WS"},
}

COLLAPSE_XENT = 50.0


@dataclass
class SampleWeights:
    weights: np.ndarray
    provenance: str
    gamma: float | None = None
    rescaled: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")
        if self.provenance == "biased-confidence" and self.gamma is not None:
            lo, hi = ((10.0 / self.gamma, 10.0) if self.rescaled
                      else (1.0, self.gamma))
            if self.weights.min() < lo - 1e-12 or self.weights.max() > hi + 1e-12:
                raise ValueError(f"weights outside [{lo}, {hi}]")


@dataclass
class BiasedClassifierArtifact:
    """Frozen amplified classifier with cached per-sample responses."""

    params: MlpParams
    confidences: np.ndarray        # (N,) true-class probability, in (0, 1]
    class_probs: np.ndarray        # (N, C) full probability rows
    t_bias: int
    tau: float

    def __post_init__(self):
        self.confidences = np.asarray(self.confidences, dtype=np.float64)
        if np.any(self.confidences <= 0) or np.any(self.confidences > 1):
            raise ValueError("confidences must lie in (0, 1]")


@dataclass
class AnnealConfig:
    """Linear ramp from a shared initial weight to the per-sample weight."""

    w_init: float = 1.0
    t_anneal: int = 0

    def __post_init__(self):
        if self.w_init <= 0:
            raise ValueError("initial weight must be positive")
        if self.t_anneal < 0:
            raise ValueError("t_anneal must be nonnegative")


@dataclass
class TbaConfig:
    gamma: float

    def __post_init__(self):
        if self.gamma <= 1.0:
            raise ValueError("gamma must exceed 1")


def train_biased_classifier(train_ds: LabeledDataset, gce: GceConfig,
                            t_bias: int, cfg: TrainConfig) -> BiasedClassifierArtifact:
    """Amplify the shortcut: t_bias epochs of mean-GCE training, then freeze.

    Aborts with a diagnostic if the mean (uncapped) train cross-entropy
    blows past COLLAPSE_XENT, the signature of amplification collapse.
    """
    if t_bias < 1:
        raise ValueError("t_bias must be >= 1")
    from dataclasses import replace
    bias_cfg = replace(cfg, epochs=t_bias)
    params, _ = train(train_ds, bias_cfg, loss="gce", tau=gce.tau,
                      abort_xent_above=COLLAPSE_XENT)
    probs = softmax_numpy(mlp_forward(params, train_ds.features))
    conf = probs[np.arange(len(train_ds)), train_ds.labels]
    conf = np.maximum(conf, 1e-300)  # keep strictly positive for 1/p
    return BiasedClassifierArtifact(params=params, confidences=conf,
                                    class_probs=probs, t_bias=t_bias,
                                    tau=gce.tau)


def compute_weights_clamped(confidences: np.ndarray, gamma: float) -> SampleWeights:
    """w_n = min(1 / p(y_n|x_n), gamma), so w_n lies in [1, gamma]."""
    if gamma <= 1.0:
        raise ValueError("gamma must exceed 1")
    conf = np.asarray(confidences, dtype=np.float64)
    if np.any(conf <= 0) or np.any(conf > 1):
        raise ValueError("confidences must lie in (0, 1]")
    w = np.minimum(1.0 / conf, gamma)
    return SampleWeights(w, provenance="biased-confidence", gamma=gamma)


def rescale_weights(w: SampleWeights) -> SampleWeights:
    """Multiply by 10/gamma so the ceiling becomes 10 (range [10/gamma, 10])."""
    if w.rescaled:
        raise ValueError("weights already rescaled")
    if w.gamma is None:
        raise ValueError("rescaling needs the clamp ceiling")
    return SampleWeights(w.weights * (10.0 / w.gamma), provenance=w.provenance,
                         gamma=w.gamma, rescaled=True)


def anneal_weight(w_n, t: int, ac: AnnealConfig):
    """Weight at step t: linear from w_init to w_n over t_anneal steps."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    w_n = np.asarray(w_n, dtype=np.float64)
    if ac.t_anneal == 0 or t >= ac.t_anneal:
        return w_n
    return ac.w_init + t * (w_n - ac.w_init) / ac.t_anneal


def weighted_sampler(weights: np.ndarray, batch_size: int,
                     seed: int) -> Iterator[np.ndarray]:
    """I.i.d. batches with replacement, P(pick n) = w_n / sum(w)."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("negative weight")
    total = w.sum()
    if total <= 0:
        raise ValueError("all weights are zero")
    p = w / total
    rng = np.random.default_rng(seed)
    n = len(w)
    while True:
        yield rng.choice(n, size=batch_size, p=p)


def lff_weight(loss_biased, loss_debiased):
    """loss_b / (loss_b + loss_d) in [0, 1]; 0/0 defined as 0.5."""
    lb = np.asarray(loss_biased, dtype=np.float64)
    ld = np.asarray(loss_debiased, dtype=np.float64)
    if np.any(lb < 0) or np.any(ld < 0):
        raise ValueError("losses must be nonnegative")
    total = lb + ld
    with np.errstate(invalid="ignore"):
        w = np.where(total > 0, lb / np.where(total > 0, total, 1.0), 0.5)
    return float(w) if w.ndim == 0 else w


def pgd_weight(p_vec: np.ndarray, y, h: np.ndarray):
    """Norm of the last-layer weight gradient: ||(p - 1_y) h^T|| = ||p - 1_y|| * ||h||."""
    p = np.atleast_2d(np.asarray(p_vec, dtype=np.float64))
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    resid = p.copy()
    resid[np.arange(p.shape[0]), y] -= 1.0
    w = np.linalg.norm(resid, axis=1) * np.linalg.norm(h, axis=1)
    return float(w[0]) if np.ndim(p_vec) == 1 else w


def tba_adjusted_probs(logits: np.ndarray, p_psi: np.ndarray,
                       gamma: float) -> np.ndarray:
    """softmax(f + log v) with v = max(p_psi, 1/gamma), rows summing to 1."""
    if gamma <= 1.0:
        raise ValueError("gamma must exceed 1")
    v = np.maximum(np.asarray(p_psi, dtype=np.float64), 1.0 / gamma)
    shifted = np.asarray(logits, dtype=np.float64) + np.log(v)
    return softmax_numpy(shifted)


def oracle_ub_weights(ds: LabeledDataset) -> SampleWeights:
    """Exact 1/p(u|b) from the generator: 1/(1-rho) aligned, (C-1)/rho conflicting."""
    if ds.cfg is None:
        raise ValueError("dataset lacks its generation config; exact conditional unknown")
    if ds.aligned is None:
        raise ValueError("dataset lacks bias labels")
    rho, c = ds.cfg.bc_ratio, ds.num_classes
    w = np.where(ds.aligned, 1.0 / (1.0 - rho), (c - 1) / rho)
    return SampleWeights(w, provenance="oracle-ub")


def oracle_yb_weights(ds: LabeledDataset) -> SampleWeights:
    """1 / p_hat(y|b) from the empirical conditional of the training data."""
    est = estimate_p_y_given_b(ds)
    p = est.table[ds.labels, ds.bias]
    return SampleWeights(1.0 / p, provenance="oracle-yb")


def _oracle_ub_table(ds: LabeledDataset) -> np.ndarray:
    """(N, C) rows of the analytic p(y=c | b_n)."""
    rho, c = ds.cfg.bc_ratio, ds.num_classes
    table = np.full((c, c), rho / (c - 1))
    np.fill_diagonal(table, 1.0 - rho)
    return table[:, ds.bias].T  # table[y, b] -> rows indexed by sample


@dataclass
class PipelineResult:
    params: MlpParams
    history: list[MetricsRow]
    weights: SampleWeights | None
    artifact: BiasedClassifierArtifact | None = None


def _make_eval(test_ds, beta_fn):
    def eval_fn(epoch, params, stats):
        acc, ba, bc = evaluate_accuracy(params, test_ds)
        return MetricsRow(epoch=epoch, train_loss=stats["train_loss"],
                          test_acc=acc, test_acc_ba=ba, test_acc_bc=bc,
                          beta=beta_fn(params, stats["step"]),
                          seconds=stats["seconds"])
    return eval_fn


def run_debias_pipeline(train_ds: LabeledDataset, test_ds: LabeledDataset,
                        scheme: str, method: str, *,
                        train_cfg: TrainConfig,
                        gamma: float | None = None,
                        t_bias: int = 10,
                        gce: GceConfig | None = None,
                        anneal: AnnealConfig | None = None,
                        artifact: BiasedClassifierArtifact | None = None,
                        bias_cfg: TrainConfig | None = None,
                        vcae_cfg=None,
                        vcae_train_cfg: TrainConfig | None = None,
                        vcae_weight_cap: float = 100.0) -> PipelineResult:
    """Train a debiased classifier under the requested scheme/method pair.

    Two-stage schemes freeze their weights before the main run; the
    loss-ratio scheme recomputes weights from both classifiers every step.
    The per-epoch beta records the weight mass on conflicting samples for
    whatever weights were in force at the epoch's final step.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method not in _COMPATIBLE[scheme]:
        raise ValueError(f"scheme {scheme!r} cannot drive method {method!r}")
    if train_ds.aligned is None:
        raise ValueError("training data needs bias labels for metrics")
    gce = gce or GceConfig()
    anneal = anneal or AnnealConfig()

    if scheme == "lff":
        return _run_lff(train_ds, test_ds, gce, train_cfg)

    if scheme in ("biased-confidence", "pgd") and artifact is None:
        artifact = train_biased_classifier(train_ds, gce, t_bias,
                                           bias_cfg or train_cfg)

    # resolve per-sample weights (or the TBA adjustment table)
    logit_offset = None
    if method == "TBA":
        if gamma is None:
            raise ValueError("TBA needs gamma")
        if scheme == "biased-confidence":
            cond = artifact.class_probs
        elif scheme == "oracle-yb":
            cond = estimate_p_y_given_b(train_ds).table[:, train_ds.bias].T
        else:  # oracle-ub
            cond = _oracle_ub_table(train_ds)
        v = np.maximum(cond, 1.0 / gamma)
        logit_offset = np.log(v)
        # implied correction magnitude per sample, for the beta metric
        implied = np.minimum(1.0 / v[np.arange(len(train_ds)), train_ds.labels],
                             gamma)
        weights = SampleWeights(implied, provenance=scheme,
                                gamma=gamma)
    elif scheme == "vanilla":
        weights = SampleWeights(np.ones(len(train_ds)), provenance="vanilla")
    elif scheme == "oracle-ub":
        weights = oracle_ub_weights(train_ds)
    elif scheme == "oracle-yb":
        weights = oracle_yb_weights(train_ds)
    elif scheme == "biased-confidence":
        if gamma is None:
            raise ValueError("biased-confidence needs gamma")
        weights = compute_weights_clamped(artifact.confidences, gamma)
        if method in ("LW", "ALW"):
            weights = rescale_weights(weights)
    elif scheme == "pgd":
        h = mlp_final_hidden(artifact.params, train_ds.features)
        raw = pgd_weight(artifact.class_probs, train_ds.labels, h)
        total = raw.sum()
        if total <= 0:
            raise ValueError("all gradient-norm weights are zero")
        weights = SampleWeights(np.maximum(raw / total, 1e-300), provenance="pgd")
    elif scheme == "vcae":
        from .vcae import train_vcae, vcae_weights
        if vcae_cfg is None:
            raise ValueError("vcae scheme needs a VcaeConfig")
        vparams, _ = train_vcae(train_ds, vcae_cfg, vcae_train_cfg or train_cfg)
        weights = vcae_weights(vparams, train_ds, cap=vcae_weight_cap)
    else:  # pragma: no cover
        raise AssertionError(scheme)

    w_arr = weights.weights
    weight_fn = None
    sampler = None
    if method == "LW" and scheme != "vanilla":
        weight_fn = lambda idx, t: w_arr[idx]
    elif method == "ALW":
        weight_fn = lambda idx, t: anneal_weight(w_arr[idx], t, anneal)
    elif method == "WS":
        _, ws_seed = np.random.SeedSequence(train_cfg.seed).generate_state(2)
        sampler = weighted_sampler(w_arr, train_cfg.batch_size, int(ws_seed) ^ 0x5EED)

    def beta_fn(params, step_end):
        if method == "ALW":
            eff = anneal_weight(w_arr, step_end - 1, anneal)
        else:
            eff = w_arr
        return debias_bc_ratio(eff, train_ds.aligned)

    params, history = train(train_ds, train_cfg, loss="xent",
                            weight_fn=weight_fn, sampler=sampler,
                            logit_offset=logit_offset,
                            eval_fn=_make_eval(test_ds, beta_fn))
    return PipelineResult(params=params, history=history, weights=weights,
                          artifact=artifact)


def _run_lff(train_ds, test_ds, gce: GceConfig, cfg: TrainConfig) -> PipelineResult:
    """Parallel loop: amplified and debiased classifiers update every step;
    weights are the per-batch loss ratios of the two."""
    n = len(train_ds)
    seeds = np.random.SeedSequence(cfg.seed).generate_state(3)
    sizes = [train_ds.dim, *cfg.hidden, train_ds.num_classes]
    psi = init_mlp(sizes, int(seeds[0]))
    theta = init_mlp(sizes, int(seeds[1]))
    from .optim import make_optimizer
    opt_psi = make_optimizer(cfg.optimizer, cfg.lr, cfg.momentum, cfg.weight_decay)
    opt_theta = make_optimizer(cfg.optimizer, cfg.lr, cfg.momentum, cfg.weight_decay)
    sampler = shuffle_batches(n, cfg.batch_size, int(seeds[2]), cfg.shuffle)
    n_steps = steps_per_epoch(n, cfg.batch_size)
    history = []

    def full_weights():
        lb = softmax_xent(mlp_forward(psi, train_ds.features), train_ds.labels)
        ld = softmax_xent(mlp_forward(theta, train_ds.features), train_ds.labels)
        return lff_weight(lb, ld)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        loss_total = 0.0
        seen = 0
        for _ in range(n_steps):
            idx = next(sampler)
            xb, yb = train_ds.features[idx], train_ds.labels[idx]
            # ratio weights from current losses, before either update
            lb = softmax_xent(mlp_forward(psi, xb), yb)
            ld = softmax_xent(mlp_forward(theta, xb), yb)
            w = lff_weight(lb, ld)

            tape_b = ad.Tape()
            leaves_b = [tape_b.leaf(a) for a in psi.arrays]
            logits_b = _forward_graph(tape_b, leaves_b, xb)
            from .classifier import _gce_graph_loss
            loss_b = _gce_graph_loss(tape_b, logits_b, yb, gce.tau,
                                     np.ones(len(idx)))
            opt_psi.step(psi.arrays, tape_b.backward(loss_b, wrt=leaves_b))

            tape_d = ad.Tape()
            leaves_d = [tape_d.leaf(a) for a in theta.arrays]
            logits_d = _forward_graph(tape_d, leaves_d, xb)
            loss_d = weighted_mean_loss(softmax_xent(logits_d, yb), w)
            lval = loss_d.item()
            if not math.isfinite(lval):
                raise RuntimeError(f"non-finite loss at epoch {epoch}")
            opt_theta.step(theta.arrays, tape_d.backward(loss_d, wrt=leaves_d))
            loss_total += lval * len(idx)
            seen += len(idx)
        acc, ba, bc = evaluate_accuracy(theta, test_ds)
        history.append(MetricsRow(
            epoch=epoch, train_loss=loss_total / seen, test_acc=acc,
            test_acc_ba=ba, test_acc_bc=bc,
            beta=debias_bc_ratio(np.maximum(full_weights(), 1e-300),
                                 train_ds.aligned),
            seconds=time.perf_counter() - t0))
    final_w = SampleWeights(np.maximum(full_weights(), 1e-300), provenance="lff")
    return PipelineResult(params=theta, history=history, weights=final_w)
