"""Dense masked autoencoder with hand-written gradients.

Architecture: ``p -> H -> H -> H -> p``. Each hidden block is
affine -> batch norm -> x*sigmoid(x); inverted dropout follows the second
block. Unrevealed input positions are zero (the feature mean after
standardization) and the loss only covers them.
"""

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DegenerateMaskError, InsufficientDataError, NumericError, ShapeError
from .masks import MaskSampler

log = logging.getLogger(__name__)

BN_EPS = 1e-5
STD_FLOOR = 1e-6
ACTIVATION = "swish"


@dataclass
class FeatureScaler:
    mean: np.ndarray
    std: np.ndarray
    subtract_only: bool = False

    def transform(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.subtract_only:
            return x - self.mean
        return (x - self.mean) / self.std

    def inverse(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.subtract_only:
            return z + self.mean
        return z * self.std + self.mean


def fit_scaler(train, subtract_only=False):
    """Per-vertex mean and population (n-divisor) std, std floored at 1e-6."""
    x = train.thickness if hasattr(train, "thickness") else train
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientDataError("fitting the scaler needs at least 2 subjects")
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), STD_FLOOR)
    return FeatureScaler(mean=mean, std=std, subtract_only=subtract_only)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-3
    epochs: int = 200
    batch_size: int = 128
    sampling_rate: float = 0.20
    seed: int = 0
    val_seed: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: tuple = (1024, 1024, 1024)
    dropout: float = 0.5
    dropout_layer: int = 1
    bn_momentum: float = 0.1
    dtype: str = "float32"
    subtract_only: bool = False
    strategy: str = "vertex"
    excluded_roi: str = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.sampling_rate < 1.0:
            raise ValueError("sampling_rate must be in (0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class MlpModel:
    """Parameters, batch-norm buffers and the scaler of one trained network."""

    def __init__(self, dims, params, buffers, scaler, config):
        self.dims = [int(d) for d in dims]
        self.params = params
        self.buffers = buffers
        self.scaler = scaler
        self.config = config
        self.activation = ACTIVATION
        if self.dims[0] != self.dims[-1]:
            raise ShapeError("input and output dimensions must match")

    @property
    def p(self):
        return self.dims[0]

    @property
    def n_layers(self):
        return len(self.dims) - 1

    @property
    def dtype(self):
        return self.params["W0"].dtype

    @property
    def train_sampling_rate(self):
        return self.config.sampling_rate

    @classmethod
    def init(cls, p, config, scaler=None, seed=None):
        """Glorot-uniform weights, zero biases, identity batch norm."""
        seed = config.seed if seed is None else seed
        dtype = np.dtype(config.dtype)
        dims = [p, *config.hidden, p]
        rng = np.random.default_rng([seed, 0])
        params, buffers = {}, {}
        for l in range(len(dims) - 1):
            fan_in, fan_out = dims[l], dims[l + 1]
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            params[f"W{l}"] = rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)
            params[f"b{l}"] = np.zeros(fan_out, dtype=dtype)
            if l < len(dims) - 2:
                params[f"gamma{l}"] = np.ones(fan_out, dtype=dtype)
                params[f"beta{l}"] = np.zeros(fan_out, dtype=dtype)
                buffers[f"rmean{l}"] = np.zeros(fan_out, dtype=dtype)
                buffers[f"rvar{l}"] = np.ones(fan_out, dtype=dtype)
        if scaler is None:
            scaler = FeatureScaler(np.zeros(p), np.ones(p))
        return cls(dims, params, buffers, scaler, config)

    def param_names(self):
        names = []
        for l in range(self.n_layers):
            names += [f"W{l}", f"b{l}"]
            if l < self.n_layers - 1:
                names += [f"gamma{l}", f"beta{l}"]
        return names

    def buffer_names(self):
        return [f"{k}{l}" for l in range(self.n_layers - 1) for k in ("rmean", "rvar")]

    def copy(self):
        return MlpModel(
            list(self.dims),
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            copy.deepcopy(self.scaler),
            copy.deepcopy(self.config),
        )

    def astype(self, dtype):
        m = self.copy()
        m.params = {k: v.astype(dtype) for k, v in m.params.items()}
        m.buffers = {k: v.astype(dtype) for k, v in m.buffers.items()}
        m.config.dtype = np.dtype(dtype).name
        return m


def _swish(y):
    sig = expit(y)
    return y * sig, sig


def forward(model, x, train=False, rng=None, dropout_masks=None, update_stats=False):
    """Batch forward pass on already-masked standardized inputs ``x`` (B, p).

    Returns ``(out, cache)``. In train mode batch statistics are used and,
    when ``update_stats`` is set, folded into the running averages.
    """
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.p:
        raise ShapeError(f"input has {x.shape[1]} features, model expects {model.p}")
    cfg = model.config
    P = model.params
    cache = {"h0": x, "train": train}
    h = x
    n_hidden = model.n_layers - 1
    for l in range(n_hidden):
        a = h @ P[f"W{l}"] + P[f"b{l}"]
        if train:
            mu = a.mean(axis=0)
            var = a.var(axis=0)
            if update_stats:
                m = cfg.bn_momentum
                n = a.shape[0]
                unbiased = var * (n / (n - 1)) if n > 1 else var
                rm, rv = model.buffers[f"rmean{l}"], model.buffers[f"rvar{l}"]
                rm *= 1.0 - m
                rm += m * mu
                rv *= 1.0 - m
                rv += m * unbiased
        else:
            mu = model.buffers[f"rmean{l}"]
            var = model.buffers[f"rvar{l}"]
        invstd = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (a - mu) * invstd
        y = P[f"gamma{l}"] * xhat + P[f"beta{l}"]
        s, sig = _swish(y)
        drop = None
        if train and l == cfg.dropout_layer and cfg.dropout > 0.0:
            if dropout_masks is not None:
                drop = dropout_masks
            else:
                if rng is None:
                    raise ValueError("train mode with dropout needs an rng")
                keep = rng.random(s.shape) >= cfg.dropout
                drop = (keep / (1.0 - cfg.dropout)).astype(s.dtype)
            s = s * drop
        cache[f"xhat{l}"] = xhat
        cache[f"invstd{l}"] = invstd
        cache[f"y{l}"] = y
        cache[f"sig{l}"] = sig
        cache[f"drop{l}"] = drop
        cache[f"h{l + 1}"] = s
        h = s
    out = h @ P[f"W{n_hidden}"] + P[f"b{n_hidden}"]
    return out, cache


def predict(model, x_in, chunk=512):
    """Eval-mode forward in fixed-size chunks."""
    x_in = np.asarray(x_in)
    single = x_in.ndim == 1
    if single:
        x_in = x_in[None, :]
    outs = [forward(model, x_in[i:i + chunk])[0] for i in range(0, x_in.shape[0], chunk)]
    out = np.concatenate(outs) if outs else np.zeros((0, model.p), dtype=model.dtype)
    return out[0] if single else out


def _sampled_array(mask):
    return mask.sampled if hasattr(mask, "sampled") else np.asarray(mask, dtype=bool)


def masked_forward(model, x_std, mask, mode="eval", rng=None):
    """Zero the unrevealed positions of ``x_std`` and run the network."""
    x_std = np.asarray(x_std)
    sampled = _sampled_array(mask)
    if sampled.shape[-1] != x_std.shape[-1] or x_std.shape[-1] != model.p:
        raise ShapeError("mask, input and model dimensions disagree")
    x_in = np.where(sampled, x_std, 0.0).astype(model.dtype)
    out, _ = forward(model, x_in, train=(mode == "train"), rng=rng)
    return out[0] if x_std.ndim == 1 else out


def masked_mse(pred, target, mask):
    """Mean squared error over the non-sampled positions only."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    sampled = _sampled_array(mask)
    if pred.shape != target.shape or sampled.shape != pred.shape:
        raise ShapeError("pred, target and mask must have equal lengths")
    resp = ~sampled
    if not resp.any():
        raise DegenerateMaskError("mask leaves no position to reconstruct")
    d = pred[resp] - target[resp]
    return float(np.mean(d * d))


def _batch_loss(out, target, sampled):
    """Mean over samples of per-sample masked MSE, and its gradient wrt ``out``."""
    resp = ~sampled
    counts = resp.sum(axis=1)
    if np.any(counts == 0):
        raise DegenerateMaskError("a mask leaves no position to reconstruct")
    diff = np.where(resp, out - target, 0.0)
    per = (diff.astype(np.float64) ** 2).sum(axis=1) / counts
    b = out.shape[0]
    loss = float(per.mean())
    dout = (2.0 / (b * counts))[:, None].astype(out.dtype) * diff
    return loss, dout.astype(out.dtype)


def _backward(model, cache, dout):
    P = model.params
    grads = {}
    n_hidden = model.n_layers - 1
    top = f"h{n_hidden}"
    grads[f"W{n_hidden}"] = cache[top].T @ dout
    grads[f"b{n_hidden}"] = dout.sum(axis=0)
    dh = dout @ P[f"W{n_hidden}"].T
    for l in range(n_hidden - 1, -1, -1):
        if cache[f"drop{l}"] is not None:
            dh = dh * cache[f"drop{l}"]
        y, sig = cache[f"y{l}"], cache[f"sig{l}"]
        dy = dh * (sig * (1.0 + y * (1.0 - sig)))
        xhat = cache[f"xhat{l}"]
        grads[f"gamma{l}"] = (dy * xhat).sum(axis=0)
        grads[f"beta{l}"] = dy.sum(axis=0)
        dxhat = dy * P[f"gamma{l}"]
        invstd = cache[f"invstd{l}"]
        if cache["train"]:
            b = dxhat.shape[0]
            da = invstd / b * (
                b * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
        else:
            da = dxhat * invstd
        hin = cache[f"h{l}"]
        grads[f"W{l}"] = hin.T @ da
        grads[f"b{l}"] = da.sum(axis=0)
        if not (np.isfinite(grads[f"W{l}"]).all() and np.isfinite(da).all()):
            raise NumericError(f"non-finite gradient at layer {l}", layer=l)
        if l > 0:
            dh = da @ P[f"W{l}"].T
    return grads


def loss_and_grads(model, x_std, mask, target_std, rng=None, dropout_masks=None, train=True):
    """Masked MSE loss and exact gradients for one batch.

    Batch-norm statistics are treated as functions of the batch in train mode.
    """
    x_std = np.atleast_2d(np.asarray(x_std, dtype=model.dtype))
    target_std = np.atleast_2d(np.asarray(target_std, dtype=model.dtype))
    sampled = np.atleast_2d(_sampled_array(mask))
    if not (x_std.shape == target_std.shape == sampled.shape) or x_std.shape[1] != model.p:
        raise ShapeError("x_std, target_std, mask and model dimensions disagree")
    x_in = np.where(sampled, x_std, 0.0).astype(model.dtype)
    out, cache = forward(model, x_in, train=train, rng=rng, dropout_masks=dropout_masks)
    for key in [k for k in cache if k.startswith("h")]:
        if not np.isfinite(cache[key]).all():
            layer = int(key[1:])
            raise NumericError(f"non-finite activation entering layer {layer}", layer=layer)
    loss, dout = _batch_loss(out, target_std, sampled)
    return loss, _backward(model, cache, dout)


def backward(model, x_std, mask, target_std, rng=None, dropout_masks=None):
    return loss_and_grads(model, x_std, mask, target_std, rng=rng, dropout_masks=dropout_masks)[1]


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params, grads, state, cfg, t=None):
    """One AdamW update in place.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta, with
    the decay applied to affine weights (names starting with ``W``) only.
    """
    t = state.t + 1 if t is None else int(t)
    if t < 1:
        raise ValueError("step index must be >= 1")
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient passed to the optimizer")
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        theta = params[name]
        m = state.m.setdefault(name, np.zeros_like(theta))
        v = state.v.setdefault(name, np.zeros_like(theta))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if name.startswith("W") and cfg.weight_decay:
            step = step + cfg.lr * cfg.weight_decay * theta
        theta -= step.astype(theta.dtype)
    state.t = t
    return params, state


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_val_loss(self):
        return self.val_loss[self.best_epoch] if self.val_loss else float("nan")


def evaluate_masked(model, x_std, sampled, chunk=512):
    """Mean per-sample masked MSE in eval mode (standardized units)."""
    total = 0.0
    n = x_std.shape[0]
    for i in range(0, n, chunk):
        xs = x_std[i:i + chunk]
        sm = sampled[i:i + chunk]
        out = predict(model, np.where(sm, xs, 0.0).astype(model.dtype), chunk=chunk)
        loss, _ = _batch_loss(out, xs, sm)
        total += loss * xs.shape[0]
    return total / n


def train(train_cohort, val_cohort, cfg, sampler=None, scaler=None, callback=None):
    """Fit the masked autoencoder and return ``(best_model, history)``.

    Every training sample gets a fresh mask each epoch; validation uses one
    fixed set of masks drawn from ``cfg.val_seed`` so epochs are comparable.
    The checkpoint with the lowest validation error is returned.
    """
    if len(train_cohort) == 0 or val_cohort is None or len(val_cohort) == 0:
        raise InsufficientDataError("training and validation cohorts must be non-empty")
    p = train_cohort.p
    if val_cohort.p != p:
        raise ShapeError("training and validation cohorts have different vertex counts")
    if scaler is None:
        scaler = fit_scaler(train_cohort, subtract_only=cfg.subtract_only)
    if sampler is None:
        sampler = MaskSampler(p, cfg.sampling_rate)
    dtype = np.dtype(cfg.dtype)
    model = MlpModel.init(p, cfg, scaler)
    x = scaler.transform(train_cohort.thickness).astype(dtype)
    xv = scaler.transform(val_cohort.thickness).astype(dtype)
    val_sampled = sampler.draw_batch(xv.shape[0], np.random.Generator(np.random.Philox(cfg.val_seed)))
    rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState()
    history = TrainHistory()
    best, best_loss = model.copy(), np.inf
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = x[idx]
            sampled = sampler.draw_batch(idx.size, rng)
            x_in = np.where(sampled, xb, 0.0).astype(dtype)
            out, cache = forward(model, x_in, train=True, rng=rng, update_stats=True)
            loss, dout = _batch_loss(out, xb, sampled)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss in epoch {epoch + 1}", epoch=epoch + 1)
            try:
                grads = _backward(model, cache, dout)
            except NumericError as exc:
                exc.epoch = epoch + 1
                raise
            adamw_step(model.params, grads, state, cfg)
            running += loss * idx.size
        history.train_loss.append(running / n)
        val_loss = evaluate_masked(model, xv, val_sampled)
        if not np.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss in epoch {epoch + 1}", epoch=epoch + 1)
        history.val_loss.append(val_loss)
        if val_loss < best_loss:
            best_loss = val_loss
            best = model.copy()
            history.best_epoch = epoch
        log.debug("epoch %d train %.5f val %.5f", epoch + 1, history.train_loss[-1], val_loss)
        if callback is not None:
            callback(epoch, history)
    return best, history
