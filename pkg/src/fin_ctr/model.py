"""Full FIN assembly, training loop and evaluation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import numeric as nm
from .encoding import SIDE, EncodedBatch, Encoder, SampleCode, Vocabs, collate
from .fragment import EMBED_DIM, ChannelSpec, FragmentConfig, FragmentNetwork, embed, query_vector
from .integrate import IntegrateNetwork
from .numeric import AdamConfig, ParamStore, Tensor
from .store import Caps, LifelongSequence, QueryContext

VARIANTS = ("avg_pool_long", "simplified_only", "sim_style", "sten_style", "fn_only", "full_fin")


class ModelError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    user_id: str
    sequence: LifelongSequence
    query: QueryContext
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "full_fin"
    d_model: int = 16
    heads: int = 4
    mha_len: int = 20
    align_len: int = 16
    hidden: tuple = (200, 80)
    activation: str = "silu"
    per_behavior_weighting: bool = False
    integrate_avg_pool: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.activation not in nm.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")


def variant_layout(variant: str) -> tuple[dict[str, ChannelSpec], bool, bool]:
    """(fragment channel specs, integrate network on, long-term average pooling on)."""
    full = {"G": ChannelSpec(True, True), "M": ChannelSpec(True, True),
            "S": ChannelSpec(False, True), "L": ChannelSpec(False, True)}
    if variant == "full_fin":
        return full, True, False
    if variant == "fn_only":
        return full, False, False
    if variant == "sten_style":
        return {"G": full["G"], "M": full["M"]}, False, False
    if variant == "sim_style":
        return {"G": ChannelSpec(False, True)}, False, False
    if variant == "simplified_only":
        return {"G": ChannelSpec(True, False), "M": ChannelSpec(True, False)}, False, False
    if variant == "avg_pool_long":
        return {"S": ChannelSpec(False, True)}, False, True
    raise ConfigError(f"unknown variant {variant!r}")


class FinModel:
    """Fragment + Integrate networks feeding an MLP head with a 2-way softmax."""

    def __init__(self, cfg: ModelConfig, vocab_sizes: dict[str, int], seed: int = 0):
        self.cfg = cfg
        self.vocab_sizes = dict(vocab_sizes)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.store = ParamStore()
        for side in ("user", "item", "category", "geohash", "period", "count", "interval"):
            self.store.add(f"emb.{side}", nm.embedding_uniform(rng, vocab_sizes[side], EMBED_DIM))
        channels, use_integrate, self.avg_pool_long = variant_layout(cfg.variant)
        self.fragment = FragmentNetwork(
            FragmentConfig(channels, cfg.d_model, cfg.heads, cfg.mha_len, cfg.per_behavior_weighting),
            self.store, rng)
        self.integrate = (IntegrateNetwork(self.store, rng, cfg.d_model, cfg.heads, cfg.align_len,
                                           cfg.integrate_avg_pool) if use_integrate else None)
        qdim = len(SIDE) * EMBED_DIM
        width = self.fragment.out_dim + qdim + EMBED_DIM
        width += self.integrate.out_dim if self.integrate else 0
        width += qdim if self.avg_pool_long else 0
        self.input_dim = width
        dims = [width, *cfg.hidden, 2]
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            self.store.add(f"mlp.{i}.w", nm.glorot_uniform(rng, a, b))
            self.store.add(f"mlp.{i}.b", np.zeros((1, b)))
        self.n_layers = len(dims) - 1

    def representation(self, store: ParamStore, batch: EncodedBatch, attention_log=None,
                       block_order=None) -> Tensor:
        qvec = query_vector(store, batch)
        parts = [self.fragment.forward(store, batch, qvec, attention_log)]
        if self.integrate is not None:
            parts.append(self.integrate.forward(store, batch, qvec, block_order, attention_log))
        if self.avg_pool_long:
            seq = batch.seqs["A"]
            n = np.maximum(seq.mask.sum(axis=1), 1).astype(np.float64)
            w = seq.mask / n[:, None]
            embs = embed(store, seq.ids)
            parts.append(nm.concat([nm.sum_(e * w[..., None], axis=1) for e in embs], axis=-1))
        parts.append(qvec)
        parts.append(nm.take_rows(store.tensor("emb.user"), batch.user))
        return nm.concat(parts, axis=-1)

    def logits(self, batch: EncodedBatch, store: ParamStore | None = None, attention_log=None,
               block_order=None) -> Tensor:
        store = self.store if store is None else store
        h = self.representation(store, batch, attention_log, block_order)
        act = nm.ACTIVATIONS[self.cfg.activation]
        for i in range(self.n_layers):
            h = h @ store.tensor(f"mlp.{i}.w") + store.tensor(f"mlp.{i}.b")
            if i < self.n_layers - 1:
                h = act(h)
            if not np.all(np.isfinite(h.data)):
                raise ModelError(f"non-finite activation in layer mlp.{i}")
        return h

    def predict_batch(self, batch: EncodedBatch) -> np.ndarray:
        z = self.logits(batch).data
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e[:, 1] / e.sum(axis=1)

    def param_groups(self) -> set[str]:
        return self.store.groups()

    def n_params(self) -> int:
        return self.store.size()


def forward(model: FinModel, codes: Sequence[SampleCode]) -> np.ndarray:
    """Click probabilities for encoded samples."""
    return model.predict_batch(collate(codes))


def batch_loss(model: FinModel, batch: EncodedBatch, store: ParamStore | None = None) -> Tensor:
    return nm.nll_loss(model.logits(batch, store), batch.labels)


def loss(prob: float, label: int, clamp: float = 1e-12) -> float:
    """Negative log-likelihood of a binary label given the click probability."""
    p = prob if label == 1 else 1.0 - prob
    return -math.log(max(p, clamp))


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC; tied scores share their average rank."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined without both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def predict(model: FinModel, codes: Sequence[SampleCode], batch_size: int = 512) -> np.ndarray:
    out = [forward(model, codes[i:i + batch_size]) for i in range(0, len(codes), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model: FinModel, codes: Sequence[SampleCode]) -> float:
    return auc(predict(model, codes), [c.label for c in codes])


# --------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    variant: str
    seed: int
    epoch_losses: list = field(default_factory=list)
    test_auc: float | None = None
    wall_clock: float = 0.0
    steps: int = 0
    n_params: int = 0
    aborted: str | None = None

    def to_lines(self) -> str:
        lines = [f"variant\t{self.variant}", f"seed\t{self.seed}", f"steps\t{self.steps}",
                 f"n_params\t{self.n_params}", f"wall_clock\t{self.wall_clock:.3f}"]
        lines += [f"epoch_loss.{i}\t{float(v)!r}" for i, v in enumerate(self.epoch_losses)]
        if self.test_auc is not None:
            lines.append(f"test_auc\t{float(self.test_auc)!r}")
        if self.aborted:
            lines.append(f"aborted\t{self.aborted}")
        return "\n".join(lines) + "\n"

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        (directory / "metrics.tsv").write_text(self.to_lines())
        (directory / "report.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True))


class Trainer:
    """Seeded mini-batch Adam training with resumable position.

    The shuffle of epoch e is a pure function of (seed, e), so a checkpoint only
    needs the parameter store plus (epoch, batch) to resume bit-identically.
    """

    def __init__(self, model: FinModel, codes: Sequence[SampleCode], batch_size: int = 128,
                 seed: int = 0, adam: AdamConfig = AdamConfig()):
        if not codes:
            raise nm.TrainingError("training set is empty")
        self.model = model
        self.codes = list(codes)
        self.batch_size = batch_size
        self.seed = seed
        self.adam = adam
        self.epoch = 0
        self.batch = 0
        self.batch_losses: list[float] = []

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.codes) / self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.codes))

    def step(self) -> float:
        idx = self.order(self.epoch)[self.batch * self.batch_size:(self.batch + 1) * self.batch_size]
        batch = collate([self.codes[i] for i in idx])
        self.model.store.zero_grad()
        value = batch_loss(self.model, batch)
        lv = float(value.data)
        if not math.isfinite(lv):
            raise nm.TrainingError(f"non-finite loss at epoch {self.epoch} batch {self.batch}")
        value.backward()
        nm.adam_step(self.model.store, self.adam)
        self.batch_losses.append(lv)
        self.batch += 1
        if self.batch == self.batches_per_epoch:
            self.epoch += 1
            self.batch = 0
        return lv

    def run_epoch(self) -> float:
        start = self.epoch
        losses = []
        while self.epoch == start:
            losses.append(self.step())
        return float(np.mean(losses))

    def state(self) -> dict:
        return {"epoch": self.epoch, "batch": self.batch, "seed": self.seed,
                "batch_size": self.batch_size}

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = {"trainer": self.state(), "model": asdict(self.model.cfg),
                "vocab_sizes": self.model.vocab_sizes, "model_seed": self.model.seed}
        meta.update(extra or {})
        nm.save_checkpoint(path, self.model.store, self.adam, meta)

    @classmethod
    def resume(cls, path: str | Path, codes: Sequence[SampleCode]) -> "Trainer":
        model, adam, meta = load_model(path)
        st = meta["trainer"]
        tr = cls(model, codes, st["batch_size"], st["seed"], adam)
        tr.epoch, tr.batch = st["epoch"], st["batch"]
        return tr


def load_model(path: str | Path) -> tuple[FinModel, AdamConfig, dict]:
    store, adam, meta = nm.load_checkpoint(path)
    cfg = meta["model"]
    cfg["hidden"] = tuple(cfg["hidden"])
    model = FinModel(ModelConfig(**cfg), meta["vocab_sizes"], meta["model_seed"])
    if store.names() != model.store.names():
        raise ModelError(f"{path}: checkpoint parameters do not match the configured model")
    for n in store.names():
        if store.value(n).shape != model.store.value(n).shape:
            raise ModelError(f"{path}: shape mismatch for {n}")
    model.store = store
    return model, adam, meta


def train(model: FinModel, codes: Sequence[SampleCode], epochs: int, batch_size: int = 128,
          seed: int = 0, adam: AdamConfig = AdamConfig(), test_codes: Sequence[SampleCode] | None = None
          ) -> TrainReport:
    t0 = time.perf_counter()
    report = TrainReport(model.cfg.variant, seed, n_params=model.n_params())
    tr = Trainer(model, codes, batch_size, seed, adam)
    try:
        for _ in range(epochs):
            report.epoch_losses.append(tr.run_epoch())
    except nm.TrainingError as exc:
        report.aborted = str(exc)
        report.steps = model.store.step
        report.wall_clock = time.perf_counter() - t0
        raise TrainingAborted(report) from exc
    report.steps = model.store.step
    if test_codes:
        report.test_auc = evaluate(model, test_codes)
    report.wall_clock = time.perf_counter() - t0
    return report


class TrainingAborted(nm.TrainingError):
    def __init__(self, report: TrainReport):
        self.report = report
        super().__init__(report.aborted)


@dataclass(frozen=True)
class AblationBudget:
    epochs: int = 5
    batch_size: int = 128
    learning_rate: float = 0.001


def ablate(cfg: ModelConfig, variant: str, vocabs: Vocabs, train_codes, test_codes, seed: int = 0,
           budget: AblationBudget = AblationBudget()) -> TrainReport:
    """Train and evaluate one variant on shared data, seed and budget."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    model = FinModel(replace(cfg, variant=variant), vocabs.sizes(), seed)
    return train(model, train_codes, budget.epochs, budget.batch_size, seed,
                 AdamConfig(learning_rate=budget.learning_rate), test_codes)


def encode_samples(samples: Sequence[Sample], vocabs: Vocabs, caps: Caps = Caps()) -> list[SampleCode]:
    return Encoder(vocabs, caps).encode(samples)
