"""Linear hash encoder, asymmetric pairwise loss and alternating training.

Training alternates two phases per outer iteration:

1. sample query items from the database and fix the database codes ``Z``;
2. run mini-batch SGD on the relaxed pairwise loss (plus the dispersion loss)
   for a few epochs, then re-encode the whole database to refresh ``Z``.
"""

import logging
import math
import struct
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import tensor as tk
from .errors import ArgumentError, DimensionError, FormatError, TrainingDivergedError
from .head import (AttributeHeadParams, adl_from_dists, encode_features, head_forward,
                   init_head_params)
from .retrieval import CodeDatabase
from .synth import RETRIEVAL, FeatureSet, _Reader, make_rng, similarity_matrix
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

MODEL_MAGIC = b"AGMHMODL"
MODEL_VERSION = 1


@dataclass
class HashModel:
    W: Tensor  # l x kC'

    @property
    def bits(self):
        return self.W.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    k: int = 3
    channels: int = 16
    d: int = 2
    slots: int = 8
    bits: int = 24
    alpha: float = 1.0
    beta: float = 0.5
    outer_iterations: int = 10
    epochs_per_iteration: int = 10
    batch_size: int = 8
    query_sample_size: int = 128
    lr: float = 2e-5
    lr_drop_at: int = 9
    lr_drop_factor: float = 10.0
    seed: int = 0
    adl: bool = True
    siea: bool = True
    adl_denominator: str = "paper"
    similarity: str = "balanced"

    @classmethod
    def desk(cls, **kw):
        return cls(**kw)

    @classmethod
    def paper(cls, **kw):
        base = dict(k=6, channels=512, d=4, slots=128, bits=12, alpha=1.0, beta=0.5,
                    outer_iterations=40, epochs_per_iteration=30, batch_size=64,
                    query_sample_size=2000, lr=1e-3, lr_drop_at=40, lr_drop_factor=10.0,
                    similarity="hard")
        base.update(kw)
        return cls(**base)

    def validate(self, database_size=None):
        for name in ("k", "channels", "d", "slots", "bits", "outer_iterations",
                     "epochs_per_iteration", "batch_size", "query_sample_size", "lr_drop_at"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be positive, got {getattr(self, name)}")
        if self.k < 2:
            raise ArgumentError(f"k must be at least 2, got {self.k}")
        if self.alpha < 0 or self.beta < 0:
            raise ArgumentError("alpha and beta must be non-negative")
        if self.lr <= 0 or self.lr_drop_factor <= 0:
            raise ArgumentError("lr and lr_drop_factor must be positive")
        if self.adl_denominator not in ("paper", "pairs"):
            raise ArgumentError(f"adl_denominator must be paper or pairs, got {self.adl_denominator!r}")
        if self.similarity not in ("hard", "balanced"):
            raise ArgumentError(f"similarity must be hard or balanced, got {self.similarity!r}")
        if database_size is not None and self.query_sample_size > database_size:
            raise ArgumentError(
                f"query_sample_size={self.query_sample_size} exceeds database size {database_size}"
            )

    def lr_at(self, iteration):
        """Learning rate for 1-based outer ``iteration``."""
        return self.lr / self.lr_drop_factor if iteration >= self.lr_drop_at else self.lr

    @property
    def uses_adl(self):
        return self.adl and self.beta > 0


def init_model(rng, bits, in_dim):
    return HashModel(Tensor(rng.normal(0.0, math.sqrt(2.0 / in_dim), size=(bits, in_dim))))


def _check_encoder(x, model):
    if x.ndim != 1 or x.shape[0] != model.W.shape[1]:
        raise DimensionError(f"encoder expects a {model.W.shape[1]}-vector, got shape {x.shape}")


def encode_relaxed(x, model: HashModel):
    _check_encoder(x, model)
    return tk.tanh(tk.matmul(model.W, x))


def sign(v):
    """Elementwise sign with sign(0) = +1, as int8."""
    return np.where(np.asarray(v) >= 0, 1, -1).astype(np.int8)


def encode_binary(x, model: HashModel):
    _check_encoder(x, model)
    return sign(model.W.data @ x.data)


def hash_loss_terms(u_relaxed, Z, S_row, bits, alpha):
    """``[pairwise, quantization]`` parts of :func:`hash_loss`."""
    Z = np.asarray(Z, dtype=np.float64)
    S_row = np.asarray(S_row, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != u_relaxed.shape[0] or Z.shape[0] != S_row.shape[0]:
        raise DimensionError(
            f"hash_loss: codes {Z.shape}, similarities {S_row.shape} and query {u_relaxed.shape} disagree"
        )
    resid = tk.sub(tk.matmul(Tensor(Z), u_relaxed), Tensor(bits * S_row))
    terms = [tk.inner(resid, resid)]
    if alpha:
        tk.note_kink(float(np.abs(u_relaxed.data).min()))
        target = Tensor(sign(u_relaxed.data).astype(np.float64))
        gap = tk.sub(u_relaxed, target)
        terms.append(tk.scale(tk.inner(gap, gap), alpha))
    return terms


def hash_loss(u_relaxed, Z, S_row, bits, alpha):
    """Pairwise inner-product fit against fixed database codes plus a quantization penalty.

    ``sum_t (<u~, z_t> - l S_t)^2 + alpha ||u~ - sign(u~)||^2``; the sign is
    held constant when differentiating.
    """
    terms = hash_loss_terms(u_relaxed, Z, S_row, bits, alpha)
    return terms[0] if len(terms) == 1 else tk.add(*terms)


def item_loss_terms(T, head, model, Z, S_row, cfg: TrainConfig):
    out = head_forward(T, head, siea=cfg.siea, attention=cfg.uses_adl)
    terms = hash_loss_terms(encode_relaxed(out.pooled, model), Z, S_row, model.bits, cfg.alpha)
    if cfg.uses_adl:
        terms.append(tk.scale(adl_from_dists(out.aggregation_dists, cfg.adl_denominator), cfg.beta))
    return terms


def item_loss(T, head, model, Z, S_row, cfg: TrainConfig):
    total, _ = tk._total(item_loss_terms(T, head, model, Z, S_row, cfg))
    return total


def total_loss_terms(features, S_rows, Z, model, head, cfg: TrainConfig):
    if len(features) != len(S_rows):
        raise DimensionError(f"{len(features)} items but {len(S_rows)} similarity rows")
    terms = []
    for T, s in zip(features, S_rows):
        terms.extend(item_loss_terms(T if isinstance(T, Tensor) else Tensor(T), head, model, Z, s, cfg))
    return terms


def total_loss(features, S_rows, Z, model, head, cfg: TrainConfig):
    """Sum over the batch of pairwise, quantization and (beta-weighted) dispersion terms."""
    total, _ = tk._total(total_loss_terms(features, S_rows, Z, model, head, cfg))
    return total


def balance_similarity(S):
    """Scale the -1 entries by (#similar / #dissimilar) so both kinds carry equal total weight."""
    S = np.asarray(S, dtype=np.float64)
    n_sim = np.count_nonzero(S > 0)
    n_dis = S.size - n_sim
    if n_dis == 0:
        return S
    return np.where(S > 0, 1.0, -n_sim / n_dis)


def pooled_features(features, head):
    """Pooled representation for every item (no attention work), as an (n, kC') array."""
    return np.stack([encode_features(Tensor(T), head).data for T in features])


def update_database_codes(features, head, model):
    """Binary codes for every database item: (m, l) int8 of +-1."""
    X = pooled_features(features, head)
    return sign(X @ model.W.data.T)


def center_descriptor_bias(head, features):
    """Shift each descriptor's output bias so pooled features have zero mean over ``features``.

    Sign codes of a bias-free linear map collapse to one code when every
    input shares a large common offset; relu descriptors always have one.
    """
    X = pooled_features(features, head)
    mean = X.mean(axis=0).reshape(head.k, head.channels)
    descs = [replace(p, transform2_b=Tensor(p.transform2_b.data - m))
             for p, m in zip(head.descriptors, mean)]
    return AttributeHeadParams(descs)


@dataclass
class TrainResult:
    head: AttributeHeadParams
    model: HashModel
    codes: np.ndarray  # m x l
    database: FeatureSet
    loss_trace: list  # (iteration, epoch, mean_loss)
    config: TrainConfig

    def code_database(self):
        return CodeDatabase.from_codes(self.codes, self.database.ids, self.database.labels)


def init_params(cfg: TrainConfig, in_channels):
    rng = make_rng(cfg.seed)
    head = init_head_params(rng, cfg.k, in_channels, cfg.channels, cfg.d, cfg.slots)
    model = init_model(rng, cfg.bits, cfg.k * cfg.channels)
    return head, model, rng


def train(dataset: FeatureSet, cfg: TrainConfig, on_iteration=None) -> TrainResult:
    if len(dataset) == 0:
        raise ArgumentError("cannot train on an empty dataset")
    db = dataset.subset(RETRIEVAL)
    if len(db) == 0:
        db = dataset
    cfg.validate(len(db))
    head, model, rng = init_params(cfg, dataset.shape[0])
    head = center_descriptor_bias(head, db.features)
    n_head = len(head.tensors())

    Z = update_database_codes(db.features, head, model)
    trace = []
    # divergence is detected explicitly below, so overflow warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(1, cfg.outer_iterations + 1):
            lr = cfg.lr_at(it)
            omega = np.sort(rng.choice(len(db), size=cfg.query_sample_size, replace=False))
            S = similarity_matrix(db.labels[omega], db.labels)
            if cfg.similarity == "balanced":
                S = balance_similarity(S)
            for ep in range(1, cfg.epochs_per_iteration + 1):
                order = omega[rng.permutation(len(omega))]
                pos = {int(t): r for r, t in enumerate(omega)}
                losses = []
                for start in range(0, len(order), cfg.batch_size):
                    batch = order[start:start + cfg.batch_size]
                    params = [Tensor(t.data, requires_grad=True) for t in head.tensors()]
                    params.append(Tensor(model.W.data, requires_grad=True))
                    h = head.with_tensors(params[:n_head])
                    m = HashModel(params[-1])
                    with Tape() as tape:
                        item_losses = [
                            item_loss(Tensor(db.features[t]), h, m, Z, S[pos[int(t)]], cfg)
                            for t in batch
                        ]
                        total = item_losses[0]
                        for li in item_losses[1:]:
                            total = tk.add(total, li)
                        objective = tk.scale(total, 1.0 / len(batch))
                    grads = tape.gradient(objective, params)
                    losses.extend(float(li.data) for li in item_losses)
                    new = [Tensor(p.data - lr * g) for p, g in zip(params, grads)]
                    head = head.with_tensors(new[:n_head])
                    model = HashModel(new[-1])
                mean = float(np.mean(losses))
                if not np.isfinite(mean) or not all(np.all(np.isfinite(t.data))
                                                     for t in head.tensors() + [model.W]):
                    raise TrainingDivergedError(it, ep, mean)
                trace.append((it, ep, mean))
            Z = update_database_codes(db.features, head, model)
            if on_iteration is not None:
                on_iteration(it, head, model, Z)
            log.debug("iteration %d: mean loss %.6g", it, trace[-1][2])
    return TrainResult(head, model, Z, db, trace, cfg)


def random_baseline_codes(dataset: FeatureSet, cfg: TrainConfig, seed=None):
    """Untrained head and random Gaussian ``W``: the state training starts from.

    Returns ``(head, model)``; encode with the same path as trained models.
    """
    c = cfg if seed is None else replace(cfg, seed=seed)
    head, model, _ = init_params(c, dataset.shape[0])
    db = dataset.subset(RETRIEVAL)
    head = center_descriptor_bias(head, (db if len(db) else dataset).features)
    return head, model


# --- checkpoint file ----------------------------------------------------------

_CONFIG_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _config_text(cfg: TrainConfig, in_channels):
    items = asdict(cfg)
    items["in_channels"] = in_channels
    return "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(items.items()))


def _fmt(v):
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_config_text(text):
    vals = {}
    for line in text.splitlines():
        if not line:
            continue
        k, _, v = line.partition("=")
        vals[k] = v
    in_channels = int(vals.pop("in_channels"))
    kw = {}
    for f in fields(TrainConfig):
        raw = vals[f.name]
        if f.type in (bool, "bool"):
            kw[f.name] = raw == "on"
        elif f.type in (int, "int"):
            kw[f.name] = int(raw)
        elif f.type in (float, "float"):
            kw[f.name] = float(raw)
        else:
            kw[f.name] = raw
    return TrainConfig(**kw), in_channels


def save_model(path, cfg: TrainConfig, head: AttributeHeadParams, model: HashModel):
    """Checkpoint layout (little-endian):

    magic ``AGMHMODL``, version u32, config length u32, config text (UTF-8
    ``key=value`` lines), tensor count u32, then per tensor ndim u32, dims
    u32 each, float64 values. Tensor order: ``W``, then for each descriptor
    transform1_w, transform1_b, transform2_w, transform2_b, query_w, query_b,
    mem_keys[0..d), interact[0..d-1), mem_value, align_w, align_b.
    """
    text = _config_text(cfg, head.in_channels).encode("utf-8")
    tensors = [model.W, *head.tensors()]
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", MODEL_VERSION, len(text)))
        fh.write(text)
        fh.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            fh.write(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
            fh.write(np.asarray(t.data, dtype="<f8").tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    r.expect_magic(MODEL_MAGIC)
    version, n = r.unpack("<II", "header")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model file version {version}", 8)
    try:
        cfg, in_channels = _parse_config_text(r.take(n, "config block").decode("utf-8"))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed config block: {exc}", 16) from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = []
    for i in range(count):
        (ndim,) = r.unpack("<I", f"tensor {i} rank")
        shape = r.unpack(f"<{ndim}I", f"tensor {i} shape")
        size = int(np.prod(shape)) if ndim else 1
        tensors.append(Tensor(np.frombuffer(r.take(8 * size, f"tensor {i} data"), dtype="<f8").reshape(shape)))
    r.done()
    template = init_head_params(np.random.default_rng(0), cfg.k, in_channels, cfg.channels, cfg.d, cfg.slots)
    if count != 1 + len(template.tensors()):
        raise FormatError(f"expected {1 + len(template.tensors())} tensors, found {count}", None)
    for t, ref in zip(tensors[1:], template.tensors()):
        if t.shape != ref.shape:
            raise FormatError(f"tensor shape {t.shape} does not match config (expected {ref.shape})", None)
    return cfg, template.with_tensors(tensors[1:]), HashModel(tensors[0])


def loss_trace_csv(trace, header_lines=()):
    lines = [ln.rstrip("\n") for ln in header_lines]
    lines.append("iteration,epoch,mean_loss")
    lines.extend(f"{it},{ep},{loss!r}" for it, ep, loss in trace)
    return "\n".join(lines) + "\n"
