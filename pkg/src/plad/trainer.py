"""Joint training of classifier and perturbator, run protocols, lambda sweep.

One optimizer minimizes a single objective over both parameter sets: the
classifier's cross-entropy on normal samples (label 0) and on perturbed
samples (label 1), the KL of the encoder's Gaussians against the standard
normal, and lambda times the penalty pulling (alpha, beta) toward (1, 0).
There is no adversarial alternation; every term is minimized jointly.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import classifier as clf
from . import metrics
from . import perturbator as pt
from . import autodiff as ad
from .autodiff import ContractError, NumericError, Tape, Tensor, backward
from .nn import OptimizerState, optimizer_step

MODES = ("vae", "ae", "degradation")

DEFAULT_LAMBDA_GRID = (0.1, 0.5, 1.0, 5.0, 10.0, 20.0, 50.0, 100.0)


class DivergenceError(Exception):
    """A loss component or gradient went non-finite; the run is aborted."""

    def __init__(self, component, detail=""):
        self.component = component
        super().__init__(f"run diverged in {component}" + (f": {detail}" if detail else ""))


@dataclass
class TrainingConfig:
    lam: float = 1.0
    optimizer: str = "adam"
    learning_rate: float = 0.001
    epochs: int = 100
    batch_size: int = 200
    seed: int = 0
    runs: int = 5
    mode: str = "vae"
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("lambda must be nonnegative")
        if self.epochs < 1 or self.runs < 1 or self.batch_size < 1:
            raise ContractError("epochs, runs and batch_size must be positive")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}")
        if self.seed < 0:
            raise ContractError("seed must be nonnegative")


@dataclass
class ModelSpec:
    """Architecture knobs; defaults are the tabular ones (d -> 20 -> 1)."""

    classifier_dims: list = None
    classifier_activation: str = "relu"
    classifier_bias: bool = True
    perturbator_activation: str = "relu"

    def resolved_dims(self, dim):
        return list(self.classifier_dims) if self.classifier_dims else [dim, 20, 1]

    @classmethod
    def image_default(cls, dim):
        return cls(classifier_dims=[dim, 128, 64, 1], classifier_activation="leaky_relu",
                   classifier_bias=False, perturbator_activation="leaky_relu")


@dataclass
class EpochStats:
    epoch: int
    total: float
    bce_normal: float
    bce_perturbed: float
    kl: float
    recon: float


@dataclass
class PladModel:
    classifier: clf.ClassifierNet
    perturbator: object  # VaePerturbator | AePerturbator | None
    mode: str

    def parameters(self):
        params = self.classifier.parameters()
        if self.perturbator is not None:
            params = params + self.perturbator.parameters()
        return params


def build_model(dim, mode, seed, model_spec=None, leaky_slope=0.01):
    spec = model_spec or ModelSpec()
    net = clf.ClassifierNet(spec.resolved_dims(dim), spec.classifier_activation,
                            bias=spec.classifier_bias, seed=[seed, 1],
                            leaky_slope=leaky_slope)
    if mode == "degradation":
        perturb = None
    elif mode == "ae":
        perturb = pt.AePerturbator(dim, spec.perturbator_activation, seed=[seed, 2],
                                   leaky_slope=leaky_slope)
    else:
        perturb = pt.VaePerturbator(dim, spec.perturbator_activation, seed=[seed, 2],
                                    leaky_slope=leaky_slope)
    return PladModel(classifier=net, perturbator=perturb, mode=mode)


def _component(name, thunk):
    try:
        value = thunk()
    except NumericError as e:
        raise DivergenceError(name, str(e)) from None
    return value


def plad_batch_loss(model, batch, lam, noise):
    """Total objective and its components for one mini-batch.

    Returns (total tensor, dict of component tensors). In degradation mode
    only the normal-label cross-entropy exists and lambda is ignored; in ae
    mode there is no KL term. The decomposition
    total = bce_normal + bce_perturbed + kl + lam * recon always holds.
    """
    if batch.data.ndim != 2 or batch.shape[0] < 1:
        raise ContractError(f"batch must be a nonempty (n, d) tensor, got {batch.shape}")
    zero = Tensor(0.0)
    bce_n = _component("bce_normal",
                       lambda: clf.bce_mean(clf.classifier_logit(model.classifier, batch), 0))
    if model.mode == "degradation":
        comps = {"bce_normal": bce_n, "bce_perturbed": zero, "kl": zero, "recon": zero}
        return bce_n, comps

    if model.mode == "ae":
        alpha, beta = _component("perturbator", lambda: pt.forward_perturb_ae(model.perturbator, batch))
        kl = zero
    else:
        if noise is None or noise.shape != batch.shape:
            raise ContractError("vae mode needs a noise tensor shaped like the batch")
        out = _component("perturbator", lambda: pt.forward_perturb(model.perturbator, batch, noise))
        alpha, beta = out.alpha, out.beta
        kl = _component("kl", lambda: pt.kl_standard_normal(out.mu, out.logvar))

    x_tilde = _component("perturbation", lambda: pt.apply_perturbation(batch, alpha, beta))
    bce_p = _component("bce_perturbed",
                       lambda: clf.bce_mean(clf.classifier_logit(model.classifier, x_tilde), 1))
    recon = _component("recon", lambda: pt.reconstruction_penalty(alpha, beta))

    total = _component("total", lambda: ad.add(ad.add(ad.add(bce_n, bce_p), kl),
                                               ad.scale(recon, lam)))
    return total, {"bce_normal": bce_n, "bce_perturbed": bce_p, "kl": kl, "recon": recon}


def train_run(config, train_x, run_seed=None, model_spec=None):
    """One full training run; returns (model, per-epoch stats).

    Deterministic given (config, run_seed): parameters, per-epoch shuffles
    and noise draws all derive from the run seed through independent
    generator streams.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    if train_x.ndim != 2 or train_x.shape[0] < 1:
        raise ContractError("training matrix must be nonempty (n, d)")
    seed = config.seed if run_seed is None else run_seed
    n, dim = train_x.shape
    model = build_model(dim, config.mode, seed, model_spec, config.leaky_slope)
    params = model.parameters()
    opt = OptimizerState(config.optimizer, config.learning_rate)
    noise_rng = np.random.default_rng([seed, 3])

    stats = []
    for epoch in range(config.epochs):
        perm = np.random.default_rng([seed, 4, epoch]).permutation(n)
        sums = {"total": 0.0, "bce_normal": 0.0, "bce_perturbed": 0.0, "kl": 0.0, "recon": 0.0}
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            batch = Tensor(train_x[idx])
            noise = None
            if config.mode == "vae":
                noise = Tensor(noise_rng.standard_normal(batch.shape))
            with Tape() as tape:
                total, comps = plad_batch_loss(model, batch, config.lam, noise)
            try:
                grads = backward(total, tape, params=params)
                optimizer_step(opt, params, grads)
            except NumericError as e:
                raise DivergenceError("gradient", str(e)) from None
            w = len(idx)
            sums["total"] += total.item() * w
            for name, t in comps.items():
                sums[name] += t.item() * w
        stats.append(EpochStats(epoch=epoch, total=sums["total"] / n,
                                bce_normal=sums["bce_normal"] / n,
                                bce_perturbed=sums["bce_perturbed"] / n,
                                kl=sums["kl"] / n, recon=sums["recon"] / n))
    return model, stats


def score_test_set(model, test_x):
    return clf.anomaly_score(model.classifier, np.asarray(test_x, dtype=np.float64))


def _metric_value(metric, scores, labels, f1_ratio=None):
    if metric == "auc":
        return metrics.roc_auc(scores, labels)
    if metric == "f1":
        ratio = f1_ratio if f1_ratio is not None else float(np.mean(np.asarray(labels) == 1))
        return metrics.f1_at_contamination(scores, labels, ratio)
    raise ContractError(f"unknown metric {metric!r}")


def multi_run_protocol(config, train_x, test_x, test_y, metric="auc", f1_ratio=None,
                       model_spec=None, keep_models=False, run_log_sink=None):
    """Train ``config.runs`` times with seeds seed, seed+1, ... and aggregate.

    Aborted (diverged) runs are recorded and excluded; if fewer than two runs
    survive an abort, the whole protocol fails. Runs execute in parallel when
    PLAD_THREADS is set above 1; results merge by run index.
    """
    results = [None] * config.runs
    aborted = {}
    models = [None] * config.runs

    def one(r):
        run_seed = config.seed + r
        try:
            model, stats = train_run(config, train_x, run_seed=run_seed, model_spec=model_spec)
        except DivergenceError as e:
            aborted[r] = str(e)
            return
        scores = score_test_set(model, test_x)
        results[r] = _metric_value(metric, scores, test_y, f1_ratio)
        if keep_models:
            models[r] = model
        if run_log_sink is not None:
            run_log_sink(r, stats, results[r])

    workers = max(1, int(os.environ.get("PLAD_THREADS", "1")))
    if workers > 1 and config.runs > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one, range(config.runs)))
    else:
        for r in range(config.runs):
            one(r)

    values = [v for v in results if v is not None]
    if aborted and len(values) < 2:
        raise DivergenceError("protocol", f"only {len(values)} run(s) survived; aborts: {aborted}")
    mean, std = metrics.aggregate_runs(values)
    report = metrics.EvalReport(metric=metric, per_run=values, mean=mean, std=std,
                                aborted_runs=sorted(aborted))
    if keep_models:
        return report, [m for m in models if m is not None]
    return report


@dataclass
class SweepRow:
    label: str
    lam: float  # nan for the degradation baseline row
    mean: float
    std: float
    per_run: list = field(default_factory=list)


def lambda_sweep(config, train_x, test_x, test_y, lambdas=DEFAULT_LAMBDA_GRID,
                 metric="auc", f1_ratio=None, model_spec=None):
    """One aggregated row per lambda plus a single degradation baseline row."""
    if not lambdas:
        raise ContractError("lambda grid must be nonempty")
    rows = []
    for lam in lambdas:
        cfg = replace(config, lam=float(lam))
        report = multi_run_protocol(cfg, train_x, test_x, test_y, metric, f1_ratio, model_spec)
        rows.append(SweepRow(label=f"lambda={lam:g}", lam=float(lam),
                             mean=report.mean, std=report.std, per_run=report.per_run))
    base_cfg = replace(config, mode="degradation")
    report = multi_run_protocol(base_cfg, train_x, test_x, test_y, metric, f1_ratio, model_spec)
    rows.append(SweepRow(label="degradation", lam=float("nan"),
                         mean=report.mean, std=report.std, per_run=report.per_run))
    return rows


def write_run_log(path, stats, final_metrics=None):
    """Tab-separated epoch log plus one final metrics line."""
    with open(path, "w") as fh:
        fh.write("epoch\ttotal\tbce_normal\tbce_perturbed\tkl\trecon\n")
        for s in stats:
            fh.write(f"{s.epoch}\t{s.total:.12g}\t{s.bce_normal:.12g}\t"
                     f"{s.bce_perturbed:.12g}\t{s.kl:.12g}\t{s.recon:.12g}\n")
        if final_metrics:
            pairs = "\t".join(f"{k}={v:.12g}" for k, v in final_metrics.items())
            fh.write(f"final\t{pairs}\n")
