"""Dual-branch variational model: content/style encoders, class/domain heads,
decoder, and the disentangling evidence lower bound.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binio
from .core import Tensor, as_tensor, concat, dense_stack, default_dtype, kl_to_standard_normal

MIN_SCALE = 1e-4
GROUPS = ("theta_c", "theta_s", "phi_c", "phi_s", "psi", "ova")
CHECKPOINT_MAGIC = b"HOOD"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 64
    num_classes: int = 6
    num_domains: int = 5
    content_dim: int = 8
    style_dim: int = 8
    hidden: int = 64
    head_hidden: int = 64
    ova_hidden: int = 64


@dataclass
class ModelParams:
    """Named parameter tensors, one dict per network.

    ``theta_c``/``theta_s`` are the content/style encoders, ``phi_c``/``phi_s``
    the class/domain heads, ``psi`` the decoder and ``ova`` the one-vs-all head.
    """

    theta_c: dict = field(default_factory=dict)
    theta_s: dict = field(default_factory=dict)
    phi_c: dict = field(default_factory=dict)
    phi_s: dict = field(default_factory=dict)
    psi: dict = field(default_factory=dict)
    ova: dict = field(default_factory=dict)

    def named(self) -> list[tuple[str, Tensor]]:
        return [(f"{g}.{k}", t) for g in GROUPS for k, t in getattr(self, g).items()]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def group(self, name: str) -> list[Tensor]:
        return list(getattr(self, name).values())

    @property
    def config(self) -> ModelConfig:
        enc = self.theta_c
        last_c = _num_layers(enc) - 1
        return ModelConfig(
            input_dim=enc["0.w"].shape[0],
            num_classes=self.phi_c[f"{_num_layers(self.phi_c) - 1}.w"].shape[1],
            num_domains=self.phi_s[f"{_num_layers(self.phi_s) - 1}.w"].shape[1],
            content_dim=enc[f"{last_c}.w"].shape[1] // 2,
            style_dim=self.theta_s[f"{_num_layers(self.theta_s) - 1}.w"].shape[1] // 2,
            hidden=enc["0.w"].shape[1],
            head_hidden=self.phi_c["0.w"].shape[1],
            ova_hidden=self.ova["0.w"].shape[1],
        )

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for g in GROUPS:
            setattr(out, g, {k: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                             for k, t in getattr(self, g).items()})
        return out


def _num_layers(group: dict) -> int:
    return sum(1 for k in group if k.endswith(".w") or k.endswith(".wc"))


def _dense(rng, fan_in, fan_out, dtype, gain=2.0):
    w = rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out)).astype(dtype)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out, dtype), requires_grad=True)


def _mlp_params(rng, sizes, dtype) -> dict:
    out = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        out[f"{i}.w"], out[f"{i}.b"] = _dense(rng, a, b, dtype, gain=0.1 if last else 2.0)
    return out


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Random initialisation: two hidden ReLU layers per network."""
    rng = np.random.default_rng(seed)
    dt = default_dtype()
    h, hh = config.hidden, config.head_hidden
    p = ModelParams()
    p.theta_c = _mlp_params(rng, [config.input_dim, h, h, 2 * config.content_dim], dt)
    p.theta_s = _mlp_params(rng, [config.input_dim, h, h, 2 * config.style_dim], dt)
    p.phi_c = _mlp_params(rng, [config.content_dim, hh, hh, config.num_classes], dt)
    p.phi_s = _mlp_params(rng, [config.style_dim, hh, hh, config.num_domains], dt)
    wc, b0 = _dense(rng, config.content_dim, h, dt)
    ws, _ = _dense(rng, config.style_dim, h, dt)
    p.psi = {"0.wc": wc, "0.ws": ws, "0.b": b0}
    rest = _mlp_params(rng, [h, h, config.input_dim], dt)
    p.psi.update({f"{int(k[0]) + 1}{k[1:]}": v for k, v in rest.items()})
    # the one-vs-all head sees [c, c*c] so each class can own a bounded region
    p.ova = _mlp_params(rng, [2 * config.content_dim, config.ova_hidden, 2 * config.num_classes], dt)
    return p


def mlp(x: Tensor, layers: dict, start: int = 0) -> Tensor:
    n = _num_layers(layers)
    idx = range(start, n)
    return dense_stack(as_tensor(x), [layers[f"{i}.w"] for i in idx], [layers[f"{i}.b"] for i in idx])


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian over a latent; ``scale`` is strictly positive."""

    mean: Tensor
    scale: Tensor

    def __post_init__(self):
        self.mean, self.scale = as_tensor(self.mean), as_tensor(self.scale)
        if self.mean.shape != self.scale.shape:
            raise ValueError("mean and scale shapes differ")
        if (self.scale.data <= 0).any():
            raise ValueError("posterior scale must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def _check_input(x: Tensor, layers: dict, key="0.w"):
    want = layers[key].shape[0]
    if x.shape[-1] != want:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {want}")


def _encode(x, layers) -> GaussianPosterior:
    x = as_tensor(x)
    _check_input(x, layers)
    out = mlp(x, layers)
    k = out.shape[-1] // 2
    if out.ndim == 1:
        return GaussianPosterior(out[:k], out[k:].softplus() + MIN_SCALE)
    return GaussianPosterior(out[:, :k], out[:, k:].softplus() + MIN_SCALE)


def encode_content(x, params: ModelParams) -> GaussianPosterior:
    """Content posterior q(C|x); scale goes through softplus."""
    return _encode(x, params.theta_c)


def encode_style(x, params: ModelParams) -> GaussianPosterior:
    """Style posterior q(S|x)."""
    return _encode(x, params.theta_s)


def sample_latent(post: GaussianPosterior, noise) -> Tensor:
    """Reparameterised draw ``mean + scale * noise``."""
    noise = as_tensor(noise, post.mean.dtype)
    if noise.shape != post.mean.shape:
        raise ValueError(f"noise shape {noise.shape} does not match latent shape {post.mean.shape}")
    return post.mean + post.scale * noise


def classify_class(c, params: ModelParams) -> Tensor:
    c = as_tensor(c)
    _check_input(c, params.phi_c)
    return mlp(c, params.phi_c).log_softmax(axis=-1)


def classify_domain(s, params: ModelParams) -> Tensor:
    s = as_tensor(s)
    _check_input(s, params.phi_s)
    return mlp(s, params.phi_s).log_softmax(axis=-1)


def decode(c, s, params: ModelParams) -> Tensor:
    """Reconstruction mean from a content and a style latent."""
    c, s = as_tensor(c), as_tensor(s)
    _check_input(c, params.psi, "0.wc")
    _check_input(s, params.psi, "0.ws")
    h = (c @ params.psi["0.wc"] + s @ params.psi["0.ws"] + params.psi["0.b"]).relu()
    return mlp(h, params.psi, start=1)


@dataclass
class ElboTerms:
    """Batch-averaged ELBO components, each a 0-d tensor in nats."""

    kl_content: Tensor
    kl_style: Tensor
    loglik_y_given_c: Tensor
    loglik_d_given_c: Tensor
    loglik_d_given_s: Tensor
    loglik_y_given_s: Tensor
    recon_loglik: Tensor

    def tilde_elbo(self) -> Tensor:
        return (-self.kl_content - self.kl_style
                + (self.loglik_y_given_c - self.loglik_d_given_c)
                + (self.loglik_d_given_s - self.loglik_y_given_s)
                + self.recon_loglik)

    def elbo(self) -> Tensor:
        """The bound without the two cross-branch regularisers."""
        return (-self.kl_content - self.kl_style + self.loglik_y_given_c
                + self.loglik_d_given_s + self.recon_loglik)

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in self.__dataclass_fields__}


def _batched(a) -> Tensor:
    a = as_tensor(a)
    return a.reshape(1, -1) if a.ndim == 1 else a


def elbo_tilde(x, y, d, params: ModelParams, noise_c, noise_s, class_weight=None,
               cross_floor: str = "chance", return_content: bool = False, decoder_std: float = 1.0):
    """Single-sample estimate of the disentangling ELBO, averaged over the batch.

    ``class_weight`` (one value per instance, default 1) scales the two
    class log-likelihood terms; pseudo-labelled instances below the
    confidence threshold get weight 0 but still train the domain branch.

    ``cross_floor="chance"`` floors the cross log-likelihoods log q(d|c) and
    log q(y|s) at log(1/cardinality): below chance they carry no gradient,
    so the regulariser cannot run off to infinity.  ``"none"`` keeps the
    raw terms, which are unbounded above once negated.

    ``decoder_std`` is the fixed standard deviation of the Gaussian
    reconstruction likelihood; the additive constant is dropped.

    With ``return_content`` the content posterior is returned alongside the
    terms so callers can reuse it.
    """
    if cross_floor not in ("chance", "none"):
        raise ValueError(f"unknown cross_floor {cross_floor!r}")
    x = _batched(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.intp))
    d = np.atleast_1d(np.asarray(d, dtype=np.intp))
    cfg_k = params.phi_c[f"{_num_layers(params.phi_c) - 1}.w"].shape[1]
    cfg_d = params.phi_s[f"{_num_layers(params.phi_s) - 1}.w"].shape[1]
    if y.min(initial=0) < 0 or y.max(initial=0) >= cfg_k:
        raise ValueError(f"class label out of range [0, {cfg_k})")
    if d.min(initial=0) < 0 or d.max(initial=0) >= cfg_d:
        raise ValueError(f"domain label out of range [0, {cfg_d})")
    n = x.shape[0]
    qc, qs = encode_content(x, params), encode_style(x, params)
    c = sample_latent(qc, np.reshape(noise_c, qc.mean.shape))
    s = sample_latent(qs, np.reshape(noise_s, qs.mean.shape))
    if c.shape[-1] != s.shape[-1]:
        raise ValueError("cross-branch terms need equal content and style dimensions")
    both = concat([c, s])
    lp_class = classify_class(both, params)
    lp_dom = classify_domain(both, params)
    lp_c_class, lp_s_class = lp_class[:n], lp_class[n:]
    lp_c_dom, lp_s_dom = lp_dom[:n], lp_dom[n:]
    if cross_floor == "chance":
        lp_c_dom = lp_c_dom.clip_min(-np.log(lp_c_dom.shape[-1]))
        lp_s_class = lp_s_class.clip_min(-np.log(lp_s_class.shape[-1]))
    w = np.ones(n, dtype=x.dtype) if class_weight is None else np.asarray(class_weight, dtype=x.dtype)
    inv = 1.0 / n
    recon = decode(c, s, params)
    terms = ElboTerms(
        kl_content=kl_to_standard_normal(qc.mean, qc.scale).sum() * inv,
        kl_style=kl_to_standard_normal(qs.mean, qs.scale).sum() * inv,
        loglik_y_given_c=(lp_c_class.pick(y) * w).sum() * inv,
        loglik_d_given_c=lp_c_dom.pick(d).sum() * inv,
        loglik_d_given_s=lp_s_dom.pick(d).sum() * inv,
        loglik_y_given_s=(lp_s_class.pick(y) * w).sum() * inv,
        recon_loglik=(x - recon).square().sum() * (-0.5 * inv / decoder_std ** 2),
    )
    return (terms, qc) if return_content else terms


# ---------------------------------------------------------------------------
# checkpoint file

def save_checkpoint(params: ModelParams, path) -> None:
    """Write ``HOOD`` | version | count | (name, shape, float32 data)*."""
    named = params.named()
    chunks = [CHECKPOINT_MAGIC, binio.pack_u32(CHECKPOINT_VERSION, len(named))]
    for name, t in named:
        raw = name.encode("utf-8")
        chunks.append(binio.pack_u32(len(raw)))
        chunks.append(raw)
        chunks.append(binio.pack_u32(t.ndim, *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> ModelParams:
    r = binio.Reader(Path(path).read_bytes())
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    count = r.u32()
    params = ModelParams()
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = r.unpack("I" * ndim)
        data = r.array("<f4", int(np.prod(shape))).reshape(shape).astype(np.float32)
        group, key = name.split(".", 1)
        if group not in GROUPS:
            raise binio.FileFormatError(f"unknown parameter group {group!r}")
        getattr(params, group)[key] = Tensor(data, requires_grad=True)
    r.done()
    return params
