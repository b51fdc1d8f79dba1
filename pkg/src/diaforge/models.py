"""Denoisers, latent codecs, classifier-free guidance and the noise-prediction training loop."""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, build_schedule
from .numerics import Cache, NumericsError, Rng, check_finite, tensor_from_bytes, tensor_to_bytes

log = logging.getLogger(__name__)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Condition:
    class_id: int | None = None

    @property
    def is_null(self) -> bool:
        return self.class_id is None


NULL = Condition(None)


def _cond(cond) -> Condition:
    if cond is None:
        return NULL
    if isinstance(cond, Condition):
        return cond
    return Condition(int(cond))


# -- denoisers ---------------------------------------------------------------
#
# All denoisers share one interface over a single latent ``z`` (any shape):
#   predict(z, t, cond) -> eps
#   forward_cache(z, t, cond) -> (eps, Cache)
#   vjp_cache(cache, g) -> d<g, eps>/dz


class ZeroDenoiser:
    """Predicts zero noise everywhere."""

    def __init__(self, schedule: NoiseSchedule | None = None, num_classes: int = 2):
        self.schedule = schedule if schedule is not None else build_schedule()
        self.num_classes = num_classes

    def check_cond(self, cond) -> Condition:
        return _check_class(_cond(cond), self.num_classes)

    def predict(self, z, t, cond=None):
        self.check_cond(cond)
        return np.zeros_like(np.asarray(z, dtype=np.float64))

    def forward_cache(self, z, t, cond=None):
        eps = self.predict(z, t, cond)
        return eps, Cache([eps])

    def vjp_cache(self, cache, g):
        return np.zeros_like(g)


class LinearDenoiser:
    """Affine noise predictor ``eps = W z + b`` on the flattened latent.

    ``W`` may be a shared square matrix or a callable ``t -> matrix``.
    ``cond_W`` optionally maps class ids (``None`` for unconditional) to
    their own matrices, which is what the guidance tests need.
    """

    def __init__(self, W, b=None, schedule: NoiseSchedule | None = None, cond_W=None, num_classes: int = 2):
        self.W = W
        self.cond_W = dict(cond_W or {})
        self.schedule = schedule if schedule is not None else build_schedule()
        self.num_classes = num_classes
        dim = self.matrix(0, NULL).shape[0]
        self.b = np.zeros(dim) if b is None else np.asarray(b, dtype=np.float64).ravel()
        for key in list(self.cond_W) + [None]:
            m = self.matrix(0, Condition(key))
            if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] != self.b.size:
                raise ModelError(f"linear denoiser matrix must be square {dim}x{dim}, got {m.shape}")

    def check_cond(self, cond) -> Condition:
        return _check_class(_cond(cond), self.num_classes)

    def matrix(self, t, cond: Condition) -> np.ndarray:
        if cond.class_id in self.cond_W:
            W = self.cond_W[cond.class_id]
        else:
            W = self.W
        return np.asarray(W(t) if callable(W) else W, dtype=np.float64)

    def predict(self, z, t, cond=None):
        cond = self.check_cond(cond)
        z = np.asarray(z, dtype=np.float64)
        W = self.matrix(t, cond)
        if W.shape[1] != z.size:
            raise ModelError(f"latent of size {z.size} does not match denoiser dimension {W.shape[1]}")
        return (W @ z.ravel() + self.b).reshape(z.shape)

    def forward_cache(self, z, t, cond=None):
        cond = self.check_cond(cond)
        eps = self.predict(z, t, cond)
        return eps, Cache([eps], t=t, cond=cond, shape=np.shape(z))

    def vjp_cache(self, cache, g):
        W = self.matrix(cache.meta["t"], cache.meta["cond"])
        return (W.T @ np.ravel(g)).reshape(cache.meta["shape"])


def timestep_embedding(t, dim: int = 16) -> np.ndarray:
    """Sinusoidal embedding; ``t`` may be a scalar or a 1-D array."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class MlpDenoiser:
    """Two-hidden-layer tanh MLP predicting noise from ``[z, temb(t), cemb(c)]``.

    The class-embedding table has one extra row (the last) for the
    unconditional case so that classifier-free guidance can query it.
    """

    def __init__(self, latent_shape, schedule: NoiseSchedule, num_classes: int = 2,
                 hidden=(128, 128), temb_dim: int = 16, cemb_dim: int = 8, params=None, rng: Rng | None = None):
        self.latent_shape = tuple(int(s) for s in latent_shape)
        self.dim = int(np.prod(self.latent_shape))
        self.schedule = schedule
        self.num_classes = int(num_classes)
        self.hidden = tuple(int(h) for h in hidden)
        self.temb_dim = int(temb_dim)
        self.cemb_dim = int(cemb_dim)
        if params is None:
            params = self._init_params(rng if rng is not None else Rng(0))
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self._check_params()

    @property
    def in_dim(self) -> int:
        return self.dim + self.temb_dim + self.cemb_dim

    def _layer_sizes(self):
        sizes = [self.in_dim, *self.hidden, self.dim]
        return list(zip(sizes[:-1], sizes[1:]))

    def _init_params(self, rng: Rng) -> dict:
        params = {"cemb": 0.1 * rng.normal((self.num_classes + 1, self.cemb_dim))}
        layers = self._layer_sizes()
        for i, (n_in, n_out) in enumerate(layers):
            scale = np.sqrt(1.0 / n_in)
            if i == len(layers) - 1:
                scale *= 0.1
            params[f"W{i}"] = scale * rng.normal((n_in, n_out))
            params[f"b{i}"] = np.zeros(n_out)
        return params

    def _check_params(self):
        if self.params["cemb"].shape != (self.num_classes + 1, self.cemb_dim):
            raise ModelError(f"class embedding has shape {self.params['cemb'].shape}")
        for i, (n_in, n_out) in enumerate(self._layer_sizes()):
            if self.params[f"W{i}"].shape != (n_in, n_out) or self.params[f"b{i}"].shape != (n_out,):
                raise ModelError(f"layer {i} parameters do not match sizes {n_in}->{n_out}")

    def check_cond(self, cond) -> Condition:
        return _check_class(_cond(cond), self.num_classes)

    def _class_index(self, cond: Condition) -> int:
        return self.num_classes if cond.class_id is None else cond.class_id

    def _inputs(self, Z, t, cls):
        temb = timestep_embedding(t, self.temb_dim)
        if temb.shape[0] != Z.shape[0]:
            temb = np.broadcast_to(temb, (Z.shape[0], self.temb_dim))
        cemb = self.params["cemb"][np.atleast_1d(cls)]
        if cemb.shape[0] != Z.shape[0]:
            cemb = np.broadcast_to(cemb, (Z.shape[0], self.cemb_dim))
        return np.concatenate([Z, temb, cemb], axis=1)

    def forward_batch(self, Z, t, cls):
        """Batched forward on ``Z`` of shape ``(N, dim)``; returns ``(out, acts)``."""
        acts = [self._inputs(Z, t, cls)]
        n_layers = len(self.hidden) + 1
        h = acts[0]
        for i in range(n_layers):
            h = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < n_layers - 1:
                h = np.tanh(h)
                acts.append(h)
        return h, acts

    def backward_batch(self, acts, dout, want_params: bool = True):
        """Backprop ``dout``; returns ``(dZ, param_grads, d_class_embedding)``."""
        n_layers = len(self.hidden) + 1
        grads = {}
        d = dout
        for i in reversed(range(n_layers)):
            inp = acts[i]
            if want_params:
                grads[f"W{i}"] = inp.T @ d
                grads[f"b{i}"] = d.sum(axis=0)
            d = d @ self.params[f"W{i}"].T
            if i > 0:
                d = d * (1.0 - inp * inp)
        dZ = d[:, : self.dim]
        return dZ, grads, d[:, self.dim + self.temb_dim:]

    def predict(self, z, t, cond=None):
        eps, _ = self.forward_cache(z, t, cond)
        return eps

    def forward_cache(self, z, t, cond=None):
        cond = self.check_cond(cond)
        z = np.asarray(z, dtype=np.float64)
        if z.size != self.dim:
            raise ModelError(f"latent of shape {z.shape} does not match denoiser latent {self.latent_shape}")
        out, acts = self.forward_batch(z.reshape(1, -1), t, self._class_index(cond))
        return out.reshape(z.shape), Cache(acts, shape=z.shape)

    def vjp_cache(self, cache, g):
        dZ, _, _ = self.backward_batch(cache.arrays, np.reshape(g, (1, -1)), want_params=False)
        return dZ.reshape(cache.meta["shape"])

    def arch(self) -> dict:
        return {
            "kind": "mlp",
            "latent_shape": list(self.latent_shape),
            "num_classes": self.num_classes,
            "hidden": list(self.hidden),
            "temb_dim": self.temb_dim,
            "cemb_dim": self.cemb_dim,
        }


def _check_class(cond: Condition, num_classes: int) -> Condition:
    if cond.class_id is not None and not 0 <= cond.class_id < num_classes:
        raise ModelError(f"unknown class_id {cond.class_id} (model has {num_classes} classes)")
    return cond


class BoundDenoiser:
    """A denoiser with its condition and guidance scale fixed: ``(z, t) -> eps``."""

    def __init__(self, denoiser, cond=None, guidance: float = 1.0):
        self.denoiser = denoiser
        self.cond = _cond(cond)
        self.guidance = float(guidance)
        if self.guidance < 0:
            raise ModelError("guidance scale must be non-negative")
        if self.cond.is_null and self.guidance not in (0.0, 1.0):
            raise ModelError("classifier-free guidance needs a non-null condition")
        denoiser.check_cond(self.cond)

    @property
    def schedule(self):
        return self.denoiser.schedule

    def _plain(self):
        # w == 1 is the conditional branch alone, w == 0 the unconditional one
        if self.guidance == 1.0:
            return self.cond
        if self.guidance == 0.0:
            return NULL
        return None

    def predict(self, z, t):
        plain = self._plain()
        if plain is not None:
            return self.denoiser.predict(z, t, plain)
        return cfg_predict(self.denoiser, z, t, self.cond, self.guidance)

    def forward_cache(self, z, t):
        plain = self._plain()
        if plain is not None:
            eps, cache = self.denoiser.forward_cache(z, t, plain)
            return eps, Cache(children=[cache])
        ec, cc = self.denoiser.forward_cache(z, t, self.cond)
        eu, cu = self.denoiser.forward_cache(z, t, NULL)
        w = self.guidance
        return eu + w * (ec - eu), Cache(children=[cc, cu])

    def vjp_cache(self, cache, g):
        if len(cache.children) == 1:
            return self.denoiser.vjp_cache(cache.children[0], g)
        w = self.guidance
        cc, cu = cache.children
        return self.denoiser.vjp_cache(cc, w * g) + self.denoiser.vjp_cache(cu, (1.0 - w) * g)


def bind(denoiser, cond=None, guidance: float = 1.0):
    if isinstance(denoiser, BoundDenoiser):
        return denoiser
    return BoundDenoiser(denoiser, cond, guidance)


def predict_eps(denoiser, z_t, t, cond=None):
    return check_finite(denoiser.predict(z_t, t, _cond(cond)), "noise prediction")


def cfg_predict(denoiser, z_t, t, cond, w: float):
    """Classifier-free guidance ``eps_u + w * (eps_c - eps_u)``."""
    cond = _cond(cond)
    if w < 0:
        raise ModelError("guidance scale must be non-negative")
    if cond.is_null and w != 0:
        raise ModelError("classifier-free guidance with w != 0 needs a non-null condition")
    eps_u = denoiser.predict(z_t, t, NULL)
    if w == 0:
        return eps_u
    eps_c = denoiser.predict(z_t, t, cond)
    return eps_u + w * (eps_c - eps_u)


class DenoiserOp:
    """Denoiser at fixed ``(t, cond)`` viewed as a DiffOp on its latent input."""

    def __init__(self, denoiser, t, cond=None):
        self.denoiser, self.t, self.cond = denoiser, t, _cond(cond)

    def forward(self, z):
        return self.denoiser.predict(z, self.t, self.cond)

    def vjp(self, z, g):
        _, cache = self.denoiser.forward_cache(z, self.t, self.cond)
        return self.denoiser.vjp_cache(cache, g)


# -- codecs ------------------------------------------------------------------


class IdentityCodec:
    """Pixel-space diffusion: the latent is the image."""

    kind = "identity"

    def __init__(self, image_shape=(8, 8)):
        self.image_shape = tuple(image_shape)
        self.latent_shape = self.image_shape

    def _check(self, x, shape, what):
        if np.shape(x) != shape:
            raise ModelError(f"{what} has shape {np.shape(x)}, codec expects {shape}")

    def encode(self, x):
        self._check(x, self.image_shape, "image")
        return np.array(x, dtype=np.float64)

    def decode(self, z):
        self._check(z, self.latent_shape, "latent")
        return np.array(z, dtype=np.float64)

    def encode_vjp(self, x, g):
        return np.array(g, dtype=np.float64)

    def decode_vjp(self, z, g):
        return np.array(g, dtype=np.float64)

    def arch(self):
        return {"kind": "identity", "image_shape": list(self.image_shape)}


class LinearCodec:
    """Affine encoder/decoder pair ``z = A (x - mu)``, ``x = B z + mu``."""

    kind = "linear"

    def __init__(self, A, B, mu, image_shape, latent_shape):
        self.A = np.asarray(A, dtype=np.float64)
        self.B = np.asarray(B, dtype=np.float64)
        self.mu = np.asarray(mu, dtype=np.float64).ravel()
        self.image_shape = tuple(image_shape)
        self.latent_shape = tuple(latent_shape)
        n, k = int(np.prod(self.image_shape)), int(np.prod(self.latent_shape))
        if self.A.shape != (k, n) or self.B.shape != (n, k) or self.mu.shape != (n,):
            raise ModelError(f"linear codec parameter shapes do not match image {n} / latent {k}")

    def _check(self, x, shape, what):
        if np.shape(x) != shape:
            raise ModelError(f"{what} has shape {np.shape(x)}, codec expects {shape}")

    def encode(self, x):
        self._check(x, self.image_shape, "image")
        return (self.A @ (np.ravel(x) - self.mu)).reshape(self.latent_shape)

    def decode(self, z):
        self._check(z, self.latent_shape, "latent")
        return (self.B @ np.ravel(z) + self.mu).reshape(self.image_shape)

    def encode_vjp(self, x, g):
        return (self.A.T @ np.ravel(g)).reshape(self.image_shape)

    def decode_vjp(self, z, g):
        return (self.B.T @ np.ravel(g)).reshape(self.latent_shape)

    def arch(self):
        return {"kind": "linear", "image_shape": list(self.image_shape), "latent_shape": list(self.latent_shape)}


def train_linear_codec(images, latent_dim: int, latent_shape=None, whiten: bool = False) -> LinearCodec:
    """Fit the optimal linear autoencoder (principal subspace) to ``images``.

    Latent coordinates are rescaled by one global factor so that their
    average variance is 1, or per coordinate when ``whiten`` is set.
    """
    X = np.stack([np.ravel(im) for im in images])
    image_shape = np.shape(images[0])
    mu = X.mean(axis=0)
    _, svals, Vt = np.linalg.svd(X - mu, full_matrices=False)
    if latent_dim > Vt.shape[0]:
        raise ModelError(f"latent_dim {latent_dim} exceeds data rank bound {Vt.shape[0]}")
    basis = Vt[:latent_dim]
    # deterministic sign convention
    signs = np.sign(basis[np.arange(latent_dim), np.argmax(np.abs(basis), axis=1)])
    basis = basis * signs[:, None]
    std = svals[:latent_dim] / np.sqrt(max(X.shape[0] - 1, 1))
    std = np.maximum(std, 1e-6)
    if not whiten:
        std = np.full(latent_dim, np.sqrt(np.mean(std ** 2)))
    A = basis / std[:, None]
    B = basis.T * std[None, :]
    latent_shape = tuple(latent_shape) if latent_shape is not None else (latent_dim,)
    return LinearCodec(A, B, mu, image_shape, latent_shape)


class CodecOp:
    """One direction of a codec as a DiffOp (``which`` is ``encode`` or ``decode``)."""

    def __init__(self, codec, which: str):
        if which not in ("encode", "decode"):
            raise ModelError(f"unknown codec direction {which!r}")
        self.codec = codec
        self.which = which
        self.name = f"{codec.kind}.{which}"

    def forward(self, x):
        return getattr(self.codec, self.which)(x)

    def forward_cache(self, x):
        out = self.forward(x)
        return out, Cache([out])

    def vjp_cache(self, cache, g):
        # affine codecs: the Jacobian does not depend on the input point
        return getattr(self.codec, f"{self.which}_vjp")(None, g)

    def vjp(self, x, g):
        return getattr(self.codec, f"{self.which}_vjp")(x, g)


def encode(codec, image):
    return codec.encode(image)


def decode(codec, latent):
    return codec.decode(latent)


# -- toy data ----------------------------------------------------------------

CLASS_NAMES = ("disk", "bar")


def make_shape(class_id: int, size: int, rng: Rng, jitter: float = 0.3, edge: float = 1.0) -> np.ndarray:
    """One jittered, soft-edged shape: class 0 is a disk, class 1 a vertical bar.

    ``jitter`` bounds the centre offset in pixels (and scales the intensity
    spread); ``edge`` is the logistic slope across the boundary.
    """
    j = jitter
    c = (size - 1) / 2.0
    cy = c + rng.uniform(-j, j)
    cx = c + rng.uniform(-j, j)
    intensity = rng.uniform(1.0 - 0.5 * j, 1.0)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if class_id == 0:
        radius = size * rng.uniform(0.26, 0.34)
        sd = np.hypot(yy - cy, xx - cx) - radius
    elif class_id == 1:
        half_w = size * rng.uniform(0.10, 0.16)
        half_h = size * rng.uniform(0.32, 0.40)
        sd = np.maximum(np.abs(xx - cx) - half_w, np.abs(yy - cy) - half_h)
    else:
        raise ModelError(f"toy data has classes 0 and 1, got {class_id}")
    return intensity / (1.0 + np.exp(edge * sd))


def make_toy_dataset(count: int, size: int = 8, seed: int = 0, jitter: float = 0.3, edge: float = 1.0):
    """``count`` (image, Condition) pairs with alternating classes."""
    root = Rng(seed).split("toy")
    data = []
    for i in range(count):
        cls = i % 2
        data.append((make_shape(cls, size, root.split(i), jitter, edge), Condition(cls)))
    return data


def class_centroids(dataset) -> dict:
    groups = {}
    for img, cond in dataset:
        groups.setdefault(cond.class_id, []).append(img)
    return {k: np.mean(v, axis=0) for k, v in groups.items()}


# -- training ----------------------------------------------------------------


def diffusion_loss(denoiser: MlpDenoiser, Z, t, cls, eps) -> float:
    """Mean over the batch of ``||eps - eps_theta(z_t, c, t)||^2``."""
    s = denoiser.schedule
    ab = s.alpha_bar[np.asarray(t)]
    Zt = np.sqrt(ab)[:, None] * Z + np.sqrt(1.0 - ab)[:, None] * eps
    out, _ = denoiser.forward_batch(Zt, t, cls)
    return float(np.mean(np.sum((eps - out) ** 2, axis=1)))


def heldout_batch(dataset, schedule: NoiseSchedule, rng: Rng, repeats: int = 4):
    Z = np.stack([np.ravel(z) for z, _ in dataset] * repeats)
    cls = np.array([c.class_id for _, c in dataset] * repeats)
    t = rng.integers(0, schedule.T, Z.shape[0])
    eps = rng.normal(Z.shape)
    return Z, t, cls, eps


def train_denoiser(dataset, s: NoiseSchedule, epochs: int, rng: Rng, *, batch_size: int = 64,
                   lr: float = 1e-3, momentum: float = 0.9, cond_drop: float = 0.1,
                   hidden=(128, 128), temb_dim: int = 16, cemb_dim: int = 8, num_classes: int = 2,
                   ema: float = 0.999, heldout=None, history: list | None = None) -> MlpDenoiser:
    """Fit an :class:`MlpDenoiser` to predict the injected noise.

    Plain SGD with momentum on minibatches; each sample draws a fresh
    timestep and noise every epoch. A fraction ``cond_drop`` of labels is
    replaced by the null class so the same network also serves as the
    unconditional branch for guidance. The returned weights are an
    exponential moving average (decay ``ema``) of the SGD iterates.
    ``history``, when given, receives the mean training loss per epoch.
    """
    if not dataset:
        raise ModelError("cannot train on an empty dataset")
    shape = np.shape(dataset[0][0])
    if any(np.shape(z) != shape for z, _ in dataset):
        raise ModelError("all training latents must share one shape")
    model = MlpDenoiser(shape, s, num_classes=num_classes, hidden=hidden, temb_dim=temb_dim,
                        cemb_dim=cemb_dim, rng=rng.split("init"))
    Z_all = np.stack([np.ravel(z) for z, _ in dataset])
    cls_all = np.array([num_classes if c.is_null else c.class_id for _, c in dataset])
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    averaged = {k: v.copy() for k, v in model.params.items()}
    n = Z_all.shape[0]
    for epoch in range(epochs):
        erng = rng.split("epoch", epoch)
        order = erng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            Z = Z_all[idx]
            cls = cls_all[idx].copy()
            cls[erng.uniform(0.0, 1.0, len(idx)) < cond_drop] = num_classes
            t = erng.integers(0, s.T, len(idx))
            eps = erng.normal(Z.shape)
            ab = s.alpha_bar[t]
            Zt = np.sqrt(ab)[:, None] * Z + np.sqrt(1.0 - ab)[:, None] * eps
            out, acts = model.forward_batch(Zt, t, cls)
            resid = out - eps
            loss = float(np.mean(np.sum(resid ** 2, axis=1)))
            if not np.isfinite(loss):
                raise ModelError(f"training diverged at epoch {epoch} (loss {loss})")
            losses.append(loss)
            dout = 2.0 * resid / len(idx)
            _, grads, dcemb = model.backward_batch(acts, dout)
            gc = np.zeros_like(model.params["cemb"])
            np.add.at(gc, cls, dcemb)
            grads["cemb"] = gc
            for k, g in grads.items():
                velocity[k] = momentum * velocity[k] - lr * g
                model.params[k] += velocity[k]
                if ema:
                    averaged[k] *= ema
                    averaged[k] += (1.0 - ema) * model.params[k]
        if history is not None:
            history.append(float(np.mean(losses)))
        if heldout is not None and (epoch % 50 == 0 or epoch == epochs - 1):
            log.debug("epoch %d held-out loss %.4f", epoch, diffusion_loss(model, *heldout))
    if ema:
        model.params = averaged
    return model


# -- serialization -----------------------------------------------------------


def _pack(arr) -> str:
    return base64.b64encode(tensor_to_bytes(arr)).decode("ascii")


def _unpack(text: str) -> np.ndarray:
    return tensor_from_bytes(base64.b64decode(text))


def model_to_json(denoiser, codec=None) -> str:
    """Architecture header plus base64 DFT1 tensor blobs, with stable key order."""
    codec = codec if codec is not None else IdentityCodec(denoiser.latent_shape)
    doc = {
        "format": "diaforge-model/1",
        "schedule": denoiser.schedule.to_json(),
        "denoiser": {"arch": denoiser.arch(), "tensors": {k: _pack(v) for k, v in sorted(denoiser.params.items())}},
        "codec": {"arch": codec.arch(), "tensors": {}},
    }
    if isinstance(codec, LinearCodec):
        doc["codec"]["tensors"] = {"A": _pack(codec.A), "B": _pack(codec.B), "mu": _pack(codec.mu)}
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def model_from_json(text: str):
    """Inverse of :func:`model_to_json`; returns ``(denoiser, codec)``."""
    doc = json.loads(text)
    if doc.get("format") != "diaforge-model/1":
        raise ModelError(f"unsupported model format {doc.get('format')!r}")
    schedule = NoiseSchedule.from_json(doc["schedule"])
    arch = doc["denoiser"]["arch"]
    if arch.get("kind") != "mlp":
        raise ModelError(f"unsupported denoiser kind {arch.get('kind')!r}")
    params = {k: _unpack(v) for k, v in doc["denoiser"]["tensors"].items()}
    den = MlpDenoiser(arch["latent_shape"], schedule, num_classes=arch["num_classes"], hidden=arch["hidden"],
                      temb_dim=arch["temb_dim"], cemb_dim=arch["cemb_dim"], params=params)
    carch = doc["codec"]["arch"]
    if carch["kind"] == "identity":
        codec = IdentityCodec(carch["image_shape"])
    elif carch["kind"] == "linear":
        t = doc["codec"]["tensors"]
        codec = LinearCodec(_unpack(t["A"]), _unpack(t["B"]), _unpack(t["mu"]), carch["image_shape"],
                            carch["latent_shape"])
    else:
        raise ModelError(f"unsupported codec kind {carch['kind']!r}")
    return den, codec


def save_model(path, denoiser, codec=None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(model_to_json(denoiser, codec))


def load_model(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return model_from_json(fh.read())
    except (KeyError, NumericsError) as exc:
        raise ModelError(f"malformed model file {path}: {exc}") from exc
