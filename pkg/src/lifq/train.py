"""Optimizer, schedule, training loop, evaluation, and the gradient suite.

Training is fully deterministic given (seed, config, data): shuffling comes
from a generator keyed by (seed, epoch), batches are processed in order, and
the parameter update owns every parameter exclusively for the step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import FeatureRecord, Manifest, load_records, planted_score
from .errors import TrainingAbort
from .losses import (
    LossBreakdown,
    LossWeights,
    l1_main,
    load_balance_loss,
    total_loss,
    weighted_total,
    z_loss,
)
from .model import ModelConfig, QualityModel
from .moe import gate as gate_logits
from .tensor import Parameter, gradient_check_report

LOG_COLUMNS = ("epoch", "step", "main", "aux", "z", "total", "lr")


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4  # synthetic-distortion regime; 2e-5 authentic
    epochs: int = 30
    batch_size: int = 64
    lr_decay: float = 0.01
    decay_every: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    precision: str = "double"

    def __post_init__(self):
        # learning_rate 0 is allowed: it freezes training while keeping the
        # loop (shuffling, logging) observable.
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float) -> None:
    """Standard bias-corrected update; aborts on a non-finite gradient."""
    state.step_count += 1
    t = state.step_count
    for p in params:
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise TrainingAbort(f"non-finite gradient in parameter {p.name}")
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.assign(p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps))


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step schedule: the rate is multiplied by the decay every interval."""
    return config.learning_rate * config.lr_decay ** (epoch // config.decay_every)


@dataclass
class MosNormalizer:
    """Affine map from raw label range (train split) onto [0, 1]."""

    lo: float
    hi: float

    @staticmethod
    def fit(labels: Sequence[float]) -> "MosNormalizer":
        lo, hi = float(min(labels)), float(max(labels))
        return MosNormalizer(lo=lo, hi=hi)

    def apply(self, mos: float) -> float:
        if self.hi == self.lo:
            return 0.5
        return (mos - self.lo) / (self.hi - self.lo)


@dataclass
class TrainResult:
    log: list[tuple]  # rows matching LOG_COLUMNS
    normalizer: MosNormalizer
    final_breakdown: LossBreakdown


def _batch_objective(model: QualityModel, batch: Sequence[FeatureRecord],
                     normalizer: MosNormalizer, weights: LossWeights):
    predictions = []
    aux_sum = None
    z_sum = None
    for record in batch:
        score, routing, logits = model.forward(record)
        predictions.append(score)
        aux_term = load_balance_loss(routing)
        z_term = z_loss(logits)
        aux_sum = aux_term if aux_sum is None else aux_sum + aux_term
        z_sum = z_term if z_sum is None else z_sum + z_term
    targets = np.array([normalizer.apply(r.mos) for r in batch])
    main = l1_main(predictions, targets)
    aux = aux_sum * (1.0 / len(batch))
    z = z_sum * (1.0 / len(batch))
    return main, aux, z


def train(manifest: Manifest, base_dir: str | Path, train_ids: Sequence[str],
          model: QualityModel, config: TrainConfig,
          on_epoch: Callable[[int, LossBreakdown], None] | None = None) -> TrainResult:
    """Seeded epochs of forward / loss / backward / Adam over the train split."""
    records = load_records(manifest, base_dir, train_ids)
    normalizer = MosNormalizer.fit([r.mos for r in records])
    state = AdamState()
    log: list[tuple] = []
    breakdown = LossBreakdown(math.nan, math.nan, math.nan, math.nan)
    step = 0
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(records))
        for start in range(0, len(records), config.batch_size):
            batch = [records[i] for i in order[start:start + config.batch_size]]
            main, aux, z = _batch_objective(model, batch, normalizer, config.weights)
            total = weighted_total(main, aux, z, config.weights)
            if not math.isfinite(total.item()):
                raise TrainingAbort(f"non-finite loss at step {step}")
            model.zero_grad()
            total.backward()
            adam_step(model.parameters(), state, lr)
            breakdown = total_loss(main.item(), aux.item(), z.item(), config.weights)
            log.append((epoch, step, breakdown.main, breakdown.aux,
                        breakdown.z, breakdown.total, lr))
            step += 1
        if on_epoch is not None:
            on_epoch(epoch, breakdown)
    return TrainResult(log=log, normalizer=normalizer, final_breakdown=breakdown)


def train_l1(model: QualityModel, records: Sequence[FeatureRecord],
             normalizer: MosNormalizer) -> float:
    """Mean absolute error of the model on normalized labels (no gradients)."""
    errors = [abs(model.predict(r) - normalizer.apply(r.mos)) for r in records]
    return float(np.mean(errors))


def evaluate(records: Sequence[FeatureRecord],
             predict: Callable[[FeatureRecord], float]) -> tuple[float, float]:
    """(SROCC, PLCC) of a predictor over the given records."""
    from .losses import plcc, srocc

    if len(records) < 2:
        raise ValueError(f"evaluation needs >= 2 records, got {len(records)}")
    predictions = np.array([predict(r) for r in records])
    labels = np.array([r.mos for r in records])
    return srocc(predictions, labels), plcc(predictions, labels)


def evaluate_model(manifest: Manifest, base_dir: str | Path,
                   test_ids: Sequence[str], model: QualityModel) -> tuple[float, float]:
    records = load_records(manifest, base_dir, test_ids)
    return evaluate(records, model.predict)


def oracle_predictor(record: FeatureRecord) -> float:
    """The planted scoring function itself; perfect by construction."""
    return planted_score(record.stage3, record.stage4)


def log_to_csv(rows: Sequence[tuple]) -> str:
    lines = [",".join(LOG_COLUMNS)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row))
    return "\n".join(lines) + "\n"


# -- gradient-check suite -----------------------------------------------------


GRADCHECK_GROUPS = (
    "q_init", "stage4_proj", "stage3_proj", "gcn_adjacency", "gcn_weights",
    "attention", "ffn", "gate_weight", "gate_bias", "experts", "gamma", "score",
)


def parameter_group(name: str) -> str:
    if name == "q_init":
        return "q_init"
    if name.startswith("stage4_proj"):
        return "stage4_proj"
    if name.startswith("stage3_proj"):
        return "stage3_proj"
    if ".gcn.a" in name:
        return "gcn_adjacency"
    if ".gcn.w" in name:
        return "gcn_weights"
    if ".attn." in name:
        return "attention"
    if ".ffn." in name:
        return "ffn"
    if name == "moe.gate.weight":
        return "gate_weight"
    if name == "moe.gate.bias":
        return "gate_bias"
    if name.startswith("moe.experts"):
        return "experts"
    if name == "moe.gamma":
        return "gamma"
    if name.startswith("moe.score"):
        return "score"
    raise KeyError(f"parameter {name} belongs to no gradient-check group")


def _routing_margin(model: QualityModel, record: FeatureRecord) -> float:
    """Smallest gap between the kept and first dropped gate logit."""
    from .decoder import StageFeatures, decoder_forward

    tokens = decoder_forward(
        StageFeatures(record.stage3, record.stage4), model.decoder)
    logits = gate_logits(tokens, model.head.gate).data
    k = model.config.moe.top_k
    if k == logits.shape[1]:
        return math.inf
    ordered = np.sort(logits, axis=1)[:, ::-1]
    return float(np.min(ordered[:, k - 1] - ordered[:, k]))


def run_gradcheck_suite(seed: int, step: float = 1e-5,
                        tolerance: float = 1e-4) -> dict[str, float]:
    """Check every parameter group of a tiny model against central differences.

    Draws where the top-k selection (or the absolute-error kink) sits within
    the probe's reach of a flip are re-sampled with the next sub-seed, as is
    a draw that fails tolerance through a grazed ReLU kink; a genuine
    backward-pass defect fails at every draw and is reported.
    """
    last_report: dict[str, float] | None = None
    for attempt in range(3):
        model, record, target = _build_tiny([seed, attempt])
        margin = _routing_margin(model, record)
        score_gap = abs(model.predict(record) - target)
        if margin < 1e-3 or score_gap < 1e-3:
            continue
        report = _gradcheck_once(model, record, target, step)
        last_report = report
        if max(report.values()) < tolerance:
            return report
    if last_report is None:
        raise TrainingAbort(
            f"no stable evaluation point found for gradient check (seed {seed})")
    return last_report


def _build_tiny(seed_key) -> tuple[QualityModel, FeatureRecord, float]:
    rng = np.random.default_rng([*seed_key, 17])
    record = FeatureRecord(
        id="gradcheck",
        stage3=rng.standard_normal((4, 4, 3)),
        stage4=rng.standard_normal((2, 2, 5)),
        mos=0.0,
    )
    record.mos = planted_score(record.stage3, record.stage4)
    model = QualityModel(ModelConfig.tiny(), c3=3, c4=5,
                         seed=int(rng.integers(0, 2 ** 31)))
    # Probe a generic point rather than the (deliberately small) training
    # init: wider draws keep gate logits well separated so the top-k set is
    # stable under the probe.
    for p in model.parameters():
        p.assign(rng.normal(0.0, 0.2, size=p.shape))
    target = (record.mos - 25.0) / 50.0
    return model, record, target


def _gradcheck_once(model: QualityModel, record: FeatureRecord, target: float,
                    step: float) -> dict[str, float]:
    weights = LossWeights()

    def objective():
        score, routing, logits = model.forward(record)
        main = l1_main([score], np.array([target]))
        return weighted_total(main, load_balance_loss(routing),
                              z_loss(logits), weights)

    per_parameter = gradient_check_report(objective, model.parameters(), step)
    grouped = {name: 0.0 for name in GRADCHECK_GROUPS}
    for name, err in per_parameter.items():
        group = parameter_group(name)
        grouped[group] = max(grouped[group], err)
    return grouped
