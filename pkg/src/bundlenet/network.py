"""Bundle Network: an unrolled bundle method whose eta and DMP weights come from a learned model.

At every step a fixed 29-feature summary of the bundle is fed to an LSTM. Its
hidden state is split into (mean, spread) pairs for three latents, which three
MLPs decode into a query, a key for the newest bundle entry and the step size
eta. Dot-product attention of the query against all keys, normalized by softmax
or sparsemax, replaces the dual master problem. The stabilization center moves
by a softmin-weighted combination, which keeps the whole unrolled run
differentiable in the network weights. Oracle values enter the tape as nodes
whose backward uses the stored subgradient; the oracle itself is never
differentiated.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .oracles import ContractError, OracleHandle
from .solvers import SolverError, Trace, TraceRow

log = logging.getLogger(__name__)

N_FEATURES = 29
ETA_STAR_FEATURE = 1e4
CHECKPOINT_FORMAT = "bnet-ckpt-v1"
CHUNK_NAMES = ("mu_q", "s_q", "mu_k", "s_k", "mu_eta", "s_eta")


@dataclass
class NetConfig:
    latent: int = 128
    decoder_hidden: int = 1024
    n_features: int = N_FEATURES

    @property
    def lstm_hidden(self) -> int:
        return 6 * self.latent


@dataclass
class TrainConfig:
    T: int = 10
    gamma: float = 0.999
    lr: float = 1e-5
    clip: float = 5.0
    lr_decay: float = 0.9
    epochs: int = 25
    sample_latents: bool = False
    psi: str = "softmax"
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ContractError("T must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ContractError("gamma must lie in (0, 1]")
        if self.psi not in ("softmax", "sparsemax"):
            raise ContractError(f"unknown psi {self.psi!r}")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    H, L, D, F = cfg.lstm_hidden, cfg.latent, cfg.decoder_hidden, cfg.n_features
    shapes = {"lstm_W": (4 * H, F + H), "lstm_b": (4 * H,)}
    for head, out in (("q", L), ("k", L), ("eta", 1)):
        shapes[f"{head}_W1"] = (D, L)
        shapes[f"{head}_b1"] = (D,)
        shapes[f"{head}_W2"] = (out, D)
        shapes[f"{head}_b2"] = (out,)
    return shapes


def init_params(cfg: NetConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            a = 1.0 / np.sqrt(shape[1])
            params[name] = rng.uniform(-a, a, size=shape)
    return params


def zero_params(cfg: NetConfig) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}


def count_params(params) -> int:
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------------------
# network pieces


def lstm_step(P, x: ad.Value, h: ad.Value, c: ad.Value, hidden: int):
    """Standard LSTM cell with gate order (input, forget, candidate, output)."""
    z = ad.add(ad.matvec(P["lstm_W"], ad.concat([x, h])), P["lstm_b"])
    i = ad.sigmoid(ad.slice_(z, 0, hidden))
    f = ad.sigmoid(ad.slice_(z, hidden, 2 * hidden))
    g = ad.tanh(ad.slice_(z, 2 * hidden, 3 * hidden))
    o = ad.sigmoid(ad.slice_(z, 3 * hidden, 4 * hidden))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def encode_step(P, features: ad.Value, state, cfg: NetConfig):
    """One LSTM step; returns the six latent chunks and the new (h, c)."""
    if features.shape != (cfg.n_features,):
        raise ContractError(f"expected {cfg.n_features} features, got {features.shape}")
    h, c = state
    h, c = lstm_step(P, features, h, c, cfg.lstm_hidden)
    L = cfg.latent
    chunks = {name: ad.slice_(h, j * L, (j + 1) * L) for j, name in enumerate(CHUNK_NAMES)}
    return chunks, (h, c)


def sample_latents(chunks, mode: str = "mean", noise=None):
    """h = mu (mean mode) or mu + softplus(s) * eps (train-sample mode)."""
    if mode == "mean":
        if noise is not None:
            raise ContractError("mean mode takes no noise")
        return chunks["mu_q"], chunks["mu_k"], chunks["mu_eta"]
    if mode != "sample":
        raise ContractError(f"unknown latent mode {mode!r}")
    if noise is None or len(noise) != 3:
        raise ContractError("sample mode needs three noise vectors")
    out = []
    for key, eps in zip(("q", "k", "eta"), noise):
        sigma = ad.softplus(chunks[f"s_{key}"])
        out.append(ad.gaussian_reparam(chunks[f"mu_{key}"], sigma, eps))
    return tuple(out)


def _mlp(P, head: str, h: ad.Value) -> ad.Value:
    hidden = ad.relu(ad.add(ad.matvec(P[f"{head}_W1"], h), P[f"{head}_b1"]))
    return ad.add(ad.matvec(P[f"{head}_W2"], hidden), P[f"{head}_b2"])


def decode(P, h_q, h_k, h_eta):
    q = _mlp(P, "q", h_q)
    k = _mlp(P, "k", h_k)
    eta = ad.softplus(ad.index(_mlp(P, "eta", h_eta), 0))
    return q, k, eta


def attention_scores(q: ad.Value, keys: list[ad.Value]) -> ad.Value:
    if not keys:
        raise ContractError("attention over an empty key set")
    return ad.matvec(ad.stack(keys), q)


def normalize(delta: ad.Value, psi: str = "softmax") -> ad.Value:
    if psi == "softmax":
        return ad.softmax(delta)
    if psi == "sparsemax":
        return ad.sparsemax(delta)
    raise ContractError(f"unknown psi {psi!r}")


def soft_center_update(pi_new: ad.Value, phi_new: ad.Value, center: ad.Value, center_value: ad.Value):
    """r = softmin(phi_new, v_bar); center and surrogate value move by the same weights."""
    r = ad.softmin(ad.concat([phi_new, center_value]))
    r1, r2 = ad.index(r, 0), ad.index(r, 1)
    new_center = ad.add(ad.mul(r1, pi_new), ad.mul(r2, center))
    new_value = ad.add(ad.mul(r1, phi_new), ad.mul(r2, center_value))
    return new_center, new_value


# ---------------------------------------------------------------------------
# features


@dataclass
class _Entry:
    g: np.ndarray
    value: float
    point: np.ndarray


def _stats(x: np.ndarray) -> list[float]:
    return [float(x @ x), float(x.mean()), float(x.var()), float(x.min()), float(x.max())]


def extract_features(entries: list[_Entry], center: np.ndarray, center_value: float, t: int,
                     prev_eta: float, prev_w: np.ndarray, prev_theta: np.ndarray) -> np.ndarray:
    """The 29 bundle features, computed on plain arrays (they are never differentiated).

    ``prev_theta`` weights the first ``len(prev_theta)`` entries. Linearization
    errors are taken at the current center with the surrogate center value.
    """
    if not entries:
        raise ContractError("features of an empty bundle")
    G = np.array([e.g for e in entries])
    Pts = np.array([e.point for e in entries])
    vals = np.array([e.value for e in entries])
    alpha = center_value - vals - np.einsum("ij,ij->i", G, center[None, :] - Pts)
    sig = float(prev_theta @ alpha[: len(prev_theta)])
    ww = float(prev_w @ prev_w)
    g_t, pi_t = G[-1], Pts[-1]
    j_bar = int(np.argmin(alpha))
    gg = G @ g_t
    pp = Pts @ pi_t
    if len(entries) > 1:
        gg, pp = gg[:-1], pp[:-1]
    f = [
        prev_eta, ww, prev_eta * ww, sig,
        float(ww > sig), float(ETA_STAR_FEATURE * ww > sig),
        float(t), float(vals[-1]), float(center_value),
        float(alpha[j_bar]), float(alpha[-1]),
        float(np.linalg.norm(pi_t)), float(np.linalg.norm(center)), float(np.linalg.norm(G[j_bar])),
        *_stats(g_t), *_stats(pi_t),
        float(gg.min()), float(gg.max()), float(pp.min()), float(pp.max()),
        float(g_t @ prev_w),
    ]
    out = np.array(f)
    if out.shape != (N_FEATURES,) or not np.all(np.isfinite(out)):
        raise ContractError("feature vector is not 29 finite reals")
    return out


# ---------------------------------------------------------------------------
# rollout


@dataclass
class RolloutHooks:
    """Test hooks. ``replay`` reuses the features and bundle subgradients of an earlier
    rollout, so the unrolled map depends on the weights only through taped operations."""
    fixed_eta: float | None = None
    onehot_newest: bool = False
    latest_center: bool = False
    replay: "RolloutRecord | None" = None


@dataclass
class RolloutRecord:
    features: list[np.ndarray] = field(default_factory=list)
    subgradients: list[np.ndarray] = field(default_factory=list)


@dataclass
class RolloutResult:
    trajectory: list[ad.Value]
    trace: Trace
    record: RolloutRecord
    tape: ad.Tape
    leaves: dict[str, ad.Value]
    etas: list[float]


def rollout(params: dict[str, np.ndarray], oracle: OracleHandle, pi0, T: int, mode: str = "mean",
            rng: np.random.Generator | None = None, psi: str = "softmax", cfg: NetConfig | None = None,
            hooks: RolloutHooks | None = None, record_times: bool = True) -> RolloutResult:
    cfg = cfg or config_from_params(params)
    hooks = hooks or RolloutHooks()
    if T < 1:
        raise ContractError("T must be >= 1")
    if mode == "sample" and rng is None:
        raise ContractError("sample mode needs a noise generator")
    pi0 = np.array(pi0, dtype=float)
    if pi0.shape != (oracle.dimension,):
        raise ContractError("starting point dimension mismatch")
    if oracle.sign_constrained and np.any(pi0 < 0):
        raise ContractError("starting point must be nonnegative")

    tape = ad.Tape()
    leaves = {name: ad.parameter(arr, name) for name, arr in params.items()}
    P = {name: ad.on_tape(tape, v) for name, v in leaves.items()}
    trace = Trace("learned")
    record = RolloutRecord()
    start = time.perf_counter()

    def clock():
        return time.perf_counter() - start if record_times else 0.0

    ev = oracle.evaluate(pi0)
    entries = [_Entry(ev.subgradient, ev.value, pi0)]
    center = ad.constant(pi0)
    center_value = ad.constant(ev.value)
    trace.rows.append(TraceRow(0, ev.value, ev.value, ev.raw_lr_value, 1.0, "n/a", clock()))
    H = cfg.lstm_hidden
    state = (ad.constant(np.zeros(H)), ad.constant(np.zeros(H)))
    keys: list[ad.Value] = []
    prev_eta, prev_w, prev_theta = 1.0, ev.subgradient.copy(), np.ones(1)
    trajectory, etas = [], []
    try:
        for t in range(1, T + 1):
            if hooks.replay is not None:
                feats = hooks.replay.features[t - 1]
            else:
                feats = extract_features(entries, center.data, float(center_value.data), t,
                                         prev_eta, prev_w, prev_theta)
            record.features.append(feats)
            chunks, state = encode_step(P, ad.constant(feats), state, cfg)
            noise = None
            if mode == "sample":
                noise = [rng.standard_normal(cfg.latent) for _ in range(3)]
            h_q, h_k, h_eta = sample_latents(chunks, mode, noise)
            q, k, eta = decode(P, h_q, h_k, h_eta)
            keys.append(k)
            if hooks.fixed_eta is not None:
                eta = ad.constant(hooks.fixed_eta)
            if hooks.onehot_newest:
                theta = ad.constant(np.eye(len(keys))[-1])
            else:
                theta = normalize(attention_scores(q, keys), psi)
            if hooks.replay is not None:
                G = np.array(hooks.replay.subgradients[: len(keys)])
            else:
                G = np.array([e.g for e in entries])
            w = ad.matvec(ad.constant(G.T), theta)
            step = ad.sub(center, ad.mul(eta, w))
            trial = ad.relu(step) if oracle.sign_constrained else step
            ev = oracle.evaluate(trial.data.copy())
            phi = ad.linearized(trial, ev.value, ev.subgradient)
            trajectory.append(phi)
            entries.append(_Entry(ev.subgradient, ev.value, trial.data.copy()))
            if hooks.latest_center:
                center, center_value = ad.constant(trial.data), ad.constant(ev.value)
            else:
                center, center_value = soft_center_update(trial, phi, center, center_value)
            prev_eta, prev_w, prev_theta = float(eta.data), w.data.copy(), theta.data.copy()
            etas.append(prev_eta)
            trace.rows.append(TraceRow(t, ev.value, float(center_value.data), ev.raw_lr_value,
                                       prev_eta, "n/a", clock()))
    except ContractError:
        raise
    except Exception as exc:
        trace.termination = "error"
        raise SolverError(trace, exc) from exc
    record.subgradients = [e.g for e in entries]
    return RolloutResult(trajectory, trace, record, tape, leaves, etas)


def loss(trajectory: list[ad.Value], gamma: float) -> ad.Value:
    """Sum over t of gamma^(T-t) * phi(pi_t)."""
    if not trajectory:
        raise ContractError("loss of an empty trajectory")
    T = len(trajectory)
    total = ad.scale(trajectory[0], gamma ** (T - 1))
    for t in range(2, T + 1):
        total = ad.add(total, ad.scale(trajectory[t - 1], gamma ** (T - t)))
    return total


def gradients(result: RolloutResult, root: ad.Value) -> dict[str, np.ndarray]:
    ad.backward(root)
    out = {}
    for name, leaf in result.leaves.items():
        out[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    wall_time: float


def train(params: dict[str, np.ndarray], oracles: list[OracleHandle], config: TrainConfig,
          cfg: NetConfig | None = None, record_times: bool = True,
          callback=None) -> tuple[dict[str, np.ndarray], list[EpochLog]]:
    """Adam on the unrolled loss, one update per instance per epoch, in fixed instance order.

    Every oracle starts from the zero multiplier vector.
    """
    if not oracles:
        raise ContractError("training needs at least one instance")
    cfg = cfg or config_from_params(params)
    rng = np.random.default_rng(config.seed)
    opt = ad.AdamState()
    mode = "sample" if config.sample_latents else "mean"
    history: list[EpochLog] = []
    start = time.perf_counter()
    for epoch in range(config.epochs):
        lr = config.lr * config.lr_decay ** epoch
        losses = []
        for oracle in oracles:
            res = rollout(params, oracle, np.zeros(oracle.dimension), config.T, mode,
                          rng if mode == "sample" else None, config.psi, cfg, record_times=False)
            L = loss(res.trajectory, config.gamma)
            value = float(L.data)
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            losses.append(value)
            grads = ad.clip_global_norm(gradients(res, L), config.clip)
            ad.adam_param_update(params, grads, opt, lr)
        entry = EpochLog(epoch, float(np.mean(losses)),
                         time.perf_counter() - start if record_times else 0.0)
        history.append(entry)
        log.info("epoch %d mean loss %.6f", epoch, entry.mean_loss)
        if callback is not None:
            callback(entry, params)
    return params, history


# ---------------------------------------------------------------------------
# checkpoints


def config_from_params(params: dict[str, np.ndarray]) -> NetConfig:
    D, L = params["q_W1"].shape
    F = params["lstm_W"].shape[1] - 6 * L
    return NetConfig(latent=L, decoder_hidden=D, n_features=F)


def save_checkpoint(path, params: dict[str, np.ndarray], train_config: TrainConfig | None = None,
                    extra: dict | None = None) -> None:
    cfg = config_from_params(params)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "net": asdict(cfg),
        "shapes": {k: list(v.shape) for k, v in params.items()},
        "train": asdict(train_config) if train_config is not None else None,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ContractError(f"{path}: not a readable checkpoint ({exc})") from exc
    with data:
        if "__meta__" not in data.files:
            raise ContractError(f"{path}: missing checkpoint metadata")
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        params = {k.split("/", 1)[1]: np.array(data[k], dtype=float)
                  for k in data.files if k.startswith("param/")}
    expected = param_shapes(NetConfig(**meta["net"]))
    for name, shape in expected.items():
        if name not in params or params[name].shape != tuple(shape):
            raise ContractError(f"{path}: parameter {name} missing or misshaped")
    return params, meta
