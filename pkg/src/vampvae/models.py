"""Generative architectures: gated-MLP VAE, two-level hierarchical VAE,
generation and reconstruction, and binary checkpoint persistence.

The hierarchical model factorizes the variational part as
q(z1 | x, z2) q(z2 | x) and the generative part as
p(x | z1, z2) p(z1 | z2) p(z2), with the top-level prior p(z2) supplied by
the `priors` module. Every conditional Gaussian is produced by a stack of
gated dense layers followed by an affine head emitting (mean, log_var).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import (
    BernoulliParams,
    DiagGaussian,
    DiscretizedLogisticParams,
    log_normal_diag,
    sample_reparam,
)
from .errors import ContractError, DimensionError, FormatError
from .priors import (
    PRIOR_KINDS,
    MixtureOfGaussians,
    StandardGaussian,
    VampDataPrior,
    VampPrior,
    WeightedVampPrior,
    sample_prior,
)

LIKELIHOODS = ("bernoulli", "logistic")

# decoder log-scales are kept in a sane band; the probability floor in the
# discretized logistic guards the extremes anyway
LOG_SCALE_MIN = -7.0
LOG_SCALE_MAX = 7.0

CHECKPOINT_MAGIC = b"VAMP"
CHECKPOINT_VERSION = 1


@dataclass
class ModelSpec:
    """Architecture description; everything needed to rebuild a model."""

    levels: int
    data_dim: int
    latent1: int = 40
    latent2: int = 40
    hidden: int = 300
    hidden_layers: int = 2
    likelihood: str = "bernoulli"
    prior_kind: str = "sg"
    prior_components: int = 500
    prior_squash: bool = True

    def __post_init__(self):
        if self.levels not in (1, 2):
            raise ContractError(f"levels must be 1 or 2, got {self.levels}")
        for name in ("data_dim", "latent1", "latent2", "hidden",
                     "hidden_layers", "prior_components"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.likelihood not in LIKELIHOODS:
            raise ContractError(f"unknown likelihood '{self.likelihood}'")
        if self.prior_kind not in PRIOR_KINDS:
            raise ContractError(f"unknown prior '{self.prior_kind}'")

    @property
    def top_latent(self) -> int:
        return self.latent2 if self.levels == 2 else self.latent1

    def to_dict(self) -> dict:
        return {"levels": self.levels, "data_dim": self.data_dim,
                "latent1": self.latent1, "latent2": self.latent2,
                "hidden": self.hidden, "hidden_layers": self.hidden_layers,
                "likelihood": self.likelihood, "prior_kind": self.prior_kind,
                "prior_components": self.prior_components,
                "prior_squash": self.prior_squash}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class GatedDense:
    """Affine output gated element-wise by a sigmoid of a second affine map."""

    def __init__(self, in_dim: int, out_dim: int, rng):
        self.w1 = Tensor(_glorot(rng, in_dim, out_dim), requires_grad=True)
        self.b1 = Tensor(np.zeros(out_dim), requires_grad=True)
        self.w2 = Tensor(_glorot(rng, in_dim, out_dim), requires_grad=True)
        self.b2 = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.mul(x @ self.w1 + self.b1, ad.sigmoid(x @ self.w2 + self.b2))

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


class GatedStack:
    """`depth` gated dense layers: in_dim -> width -> ... -> width."""

    def __init__(self, in_dim: int, width: int, depth: int, rng):
        self.layers = []
        for i in range(depth):
            self.layers.append(GatedDense(in_dim if i == 0 else width, width, rng))

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}.{i}"))
        return out


class GaussianHead:
    """Affine map emitting (mean, log_var) halves of a diagonal Gaussian."""

    def __init__(self, in_dim: int, out_dim: int, rng):
        self.out_dim = out_dim
        self.w = Tensor(_glorot(rng, in_dim, 2 * out_dim), requires_grad=True)
        self.b = Tensor(np.zeros(2 * out_dim), requires_grad=True)

    def __call__(self, h: Tensor) -> DiagGaussian:
        raw = h @ self.w + self.b
        m = self.out_dim
        return DiagGaussian(raw.slice(1, 0, m), raw.slice(1, m, 2 * m))

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LikelihoodHead:
    """Affine map emitting Bernoulli logits or logistic (mean, log_scale)."""

    def __init__(self, in_dim: int, data_dim: int, likelihood: str, rng):
        self.data_dim = data_dim
        self.likelihood = likelihood
        width = data_dim if likelihood == "bernoulli" else 2 * data_dim
        self.w = Tensor(_glorot(rng, in_dim, width), requires_grad=True)
        self.b = Tensor(np.zeros(width), requires_grad=True)

    def __call__(self, h: Tensor):
        raw = h @ self.w + self.b
        if self.likelihood == "bernoulli":
            return BernoulliParams(raw)
        d = self.data_dim
        mean = ad.sigmoid(raw.slice(1, 0, d))
        log_scale = raw.slice(1, d, 2 * d).clip(LOG_SCALE_MIN, LOG_SCALE_MAX)
        return DiscretizedLogisticParams(mean, log_scale)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


@dataclass
class VaeRecord:
    """Per-row log-terms of the one-level objective, averaged over samples."""

    log_px: Tensor
    log_pz: Tensor
    log_qz: Tensor
    z: Tensor

    def regularizer(self) -> Tensor:
        return ad.sub(self.log_pz, self.log_qz)

    def elbo(self) -> Tensor:
        return ad.add(self.log_px, self.regularizer())


@dataclass
class HvaeRecord:
    """Per-row log-terms of the two-level objective, averaged over samples."""

    log_px: Tensor
    log_pz2: Tensor
    log_pz1: Tensor
    log_qz2: Tensor
    log_qz1: Tensor
    z1: Tensor
    z2: Tensor

    def regularizer(self) -> Tensor:
        prior_side = ad.add(self.log_pz2, self.log_pz1)
        posterior_side = ad.add(self.log_qz2, self.log_qz1)
        return ad.sub(prior_side, posterior_side)

    def elbo(self) -> Tensor:
        return ad.add(self.log_px, self.regularizer())


def _as_batch(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 1:
        t = t.reshape((1, t.shape[0]))
    if t.ndim != 2:
        raise DimensionError(f"expected a (B, D) batch, got {t.shape}")
    return t


def _average(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total * (1.0 / len(terms)) if len(terms) > 1 else total


class Vae:
    """One-level VAE: q(z|x), p(x|z), interchangeable prior p(z)."""

    def __init__(self, spec: ModelSpec, prior, rng):
        if spec.levels != 1:
            raise ContractError("Vae requires a one-level spec")
        self.spec = spec
        self.prior = prior
        self.enc = GatedStack(spec.data_dim, spec.hidden, spec.hidden_layers, rng)
        self.enc_head = GaussianHead(spec.hidden, spec.latent1, rng)
        self.dec = GatedStack(spec.latent1, spec.hidden, spec.hidden_layers, rng)
        self.dec_head = LikelihoodHead(spec.hidden, spec.data_dim,
                                       spec.likelihood, rng)
        if isinstance(prior, VampPrior):
            prior.encoder = self.encode

    def encode(self, x: Tensor) -> DiagGaussian:
        return self.enc_head(self.enc(x))

    def decode(self, z: Tensor):
        return self.dec_head(self.dec(z))

    def prior_level_posterior(self, x: Tensor) -> DiagGaussian:
        return self.encode(x)

    def forward(self, x, rng, mc_samples: int = 1) -> VaeRecord:
        if mc_samples < 1:
            raise ContractError("mc_samples must be at least 1")
        x = _as_batch(x)
        if x.shape[1] != self.spec.data_dim:
            raise DimensionError(f"data dim {x.shape[1]} != "
                                 f"{self.spec.data_dim}")
        q = self.encode(x)
        log_px, log_pz, log_qz = [], [], []
        z = None
        for _ in range(mc_samples):
            eps = Tensor(rng.standard_normal((x.shape[0], self.spec.latent1)))
            z = sample_reparam(q, eps)
            log_px.append(self.decode(z).log_prob(x))
            log_pz.append(self.prior.log_prob(z))
            log_qz.append(log_normal_diag(z, q))
        return VaeRecord(_average(log_px), _average(log_pz), _average(log_qz), z)

    def log_importance_weight(self, x, rng) -> np.ndarray:
        rec = self.forward(x, rng, mc_samples=1)
        return rec.elbo().data

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.enc.parameters("encoder"))
        out.update(self.enc_head.parameters("encoder_head"))
        out.update(self.dec.parameters("decoder"))
        out.update(self.dec_head.parameters("decoder_head"))
        out.update(self.prior.parameters())
        return out


class Hvae:
    """Two-level hierarchical VAE with a coupled top-level prior."""

    def __init__(self, spec: ModelSpec, prior, rng):
        if spec.levels != 2:
            raise ContractError("Hvae requires a two-level spec")
        self.spec = spec
        self.prior = prior
        d, h, depth = spec.data_dim, spec.hidden, spec.hidden_layers
        m1, m2 = spec.latent1, spec.latent2
        self.enc_z2 = GatedStack(d, h, depth, rng)
        self.enc_z2_head = GaussianHead(h, m2, rng)
        self.enc_z1_x = GatedStack(d, h, depth, rng)
        self.enc_z1_z = GatedStack(m2, h, depth, rng)
        self.enc_z1_joint = GatedDense(2 * h, h, rng)
        self.enc_z1_head = GaussianHead(h, m1, rng)
        self.cond_z1 = GatedStack(m2, h, depth, rng)
        self.cond_z1_head = GaussianHead(h, m1, rng)
        self.dec_z1 = GatedStack(m1, h, depth, rng)
        self.dec_z2 = GatedStack(m2, h, depth, rng)
        self.dec_joint = GatedDense(2 * h, h, rng)
        self.dec_head = LikelihoodHead(h, d, spec.likelihood, rng)
        if isinstance(prior, VampPrior):
            prior.encoder = self.encode_top

    def encode_top(self, x: Tensor) -> DiagGaussian:
        return self.enc_z2_head(self.enc_z2(x))

    def encode_bottom(self, x: Tensor, z2: Tensor,
                      x_path: Tensor | None = None) -> DiagGaussian:
        if x_path is None:
            x_path = self.enc_z1_x(x)
        joint = self.enc_z1_joint(ad.concat([x_path, self.enc_z1_z(z2)], axis=1))
        return self.enc_z1_head(joint)

    def conditional_prior(self, z2: Tensor) -> DiagGaussian:
        return self.cond_z1_head(self.cond_z1(z2))

    def decode(self, z1: Tensor, z2: Tensor):
        joint = self.dec_joint(ad.concat([self.dec_z1(z1), self.dec_z2(z2)],
                                         axis=1))
        return self.dec_head(joint)

    def prior_level_posterior(self, x: Tensor) -> DiagGaussian:
        return self.encode_top(x)

    def forward(self, x, rng, mc_samples: int = 1) -> HvaeRecord:
        if mc_samples < 1:
            raise ContractError("mc_samples must be at least 1")
        x = _as_batch(x)
        if x.shape[1] != self.spec.data_dim:
            raise DimensionError(f"data dim {x.shape[1]} != "
                                 f"{self.spec.data_dim}")
        b = x.shape[0]
        q2 = self.encode_top(x)
        x_path = self.enc_z1_x(x)
        logs: dict[str, list[Tensor]] = {k: [] for k in
                                         ("px", "pz2", "pz1", "qz2", "qz1")}
        z1 = z2 = None
        for _ in range(mc_samples):
            eps2 = Tensor(rng.standard_normal((b, self.spec.latent2)))
            z2 = sample_reparam(q2, eps2)
            q1 = self.encode_bottom(x, z2, x_path=x_path)
            eps1 = Tensor(rng.standard_normal((b, self.spec.latent1)))
            z1 = sample_reparam(q1, eps1)
            p1 = self.conditional_prior(z2)
            logs["px"].append(self.decode(z1, z2).log_prob(x))
            logs["pz2"].append(self.prior.log_prob(z2))
            logs["pz1"].append(log_normal_diag(z1, p1))
            logs["qz2"].append(log_normal_diag(z2, q2))
            logs["qz1"].append(log_normal_diag(z1, q1))
        return HvaeRecord(_average(logs["px"]), _average(logs["pz2"]),
                          _average(logs["pz1"]), _average(logs["qz2"]),
                          _average(logs["qz1"]), z1, z2)

    def log_importance_weight(self, x, rng) -> np.ndarray:
        rec = self.forward(x, rng, mc_samples=1)
        return rec.elbo().data

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.enc_z2.parameters("enc_z2"))
        out.update(self.enc_z2_head.parameters("enc_z2_head"))
        out.update(self.enc_z1_x.parameters("enc_z1_x"))
        out.update(self.enc_z1_z.parameters("enc_z1_z"))
        out.update(self.enc_z1_joint.parameters("enc_z1_joint"))
        out.update(self.enc_z1_head.parameters("enc_z1_head"))
        out.update(self.cond_z1.parameters("cond_z1"))
        out.update(self.cond_z1_head.parameters("cond_z1_head"))
        out.update(self.dec_z1.parameters("dec_z1"))
        out.update(self.dec_z2.parameters("dec_z2"))
        out.update(self.dec_joint.parameters("dec_joint"))
        out.update(self.dec_head.parameters("dec_head"))
        out.update(self.prior.parameters())
        return out


Model = Vae | Hvae


def build_prior(spec: ModelSpec, rng, data_mean=None, data_rows=None):
    kind, k = spec.prior_kind, spec.prior_components
    top = spec.top_latent
    if kind == "sg":
        return StandardGaussian(top)
    if kind == "mog":
        return MixtureOfGaussians.initialize(k, top, rng)
    if kind == "vamp":
        return VampPrior.initialize(k, spec.data_dim, rng, data_mean,
                                    squash=spec.prior_squash)
    if kind == "vamp-data":
        if data_rows is None:
            raise ContractError("vamp-data prior needs training rows")
        return VampDataPrior.from_data(np.asarray(data_rows, dtype=float), k, rng)
    if kind == "weighted-vamp":
        return WeightedVampPrior.initialize(k, spec.data_dim, rng, data_mean,
                                            squash=spec.prior_squash)
    raise ContractError(f"unknown prior '{kind}'")


def build_model(spec: ModelSpec, rng, data_mean=None, data_rows=None) -> Model:
    """Construct a freshly initialized model with its prior bound."""
    prior = build_prior(spec, rng, data_mean=data_mean, data_rows=data_rows)
    if spec.levels == 1:
        return Vae(spec, prior, rng)
    return Hvae(spec, prior, rng)


def vae_forward(x, model: Vae, rng, mc_samples: int = 1) -> VaeRecord:
    return model.forward(x, rng, mc_samples)


def hvae_forward(x, model: Hvae, rng, mc_samples: int = 1) -> HvaeRecord:
    return model.forward(x, rng, mc_samples)


@dataclass
class Generation:
    """Decoded likelihood means plus the latents that produced them."""

    x_mean: np.ndarray
    z1: np.ndarray
    z2: np.ndarray | None = None
    components: np.ndarray | None = None


def generate(model: Model, n: int, rng) -> Generation:
    """Sample the generative chain and decode to likelihood means."""
    d = model.spec.data_dim
    if n == 0:
        return Generation(np.empty((0, d)), np.empty((0, model.spec.latent1)))
    ps = sample_prior(model.prior, n, rng)
    if isinstance(model, Vae):
        x = model.decode(Tensor(ps.z)).mean_value()
        return Generation(x, ps.z, components=ps.components)
    return _decode_from_z2(model, ps.z, rng, ps.components)


def _decode_from_z2(model: Hvae, z2: np.ndarray, rng,
                    components=None) -> Generation:
    z2_t = Tensor(z2)
    p1 = model.conditional_prior(z2_t)
    eps = Tensor(rng.standard_normal((z2.shape[0], model.spec.latent1)))
    z1 = sample_reparam(p1, eps)
    x = model.decode(z1, z2_t).mean_value()
    return Generation(x, z1.data, z2=z2, components=components)


def generate_from_component(model: Model, component: int, n: int,
                            rng) -> Generation:
    """Generate with the top latent drawn from one mixture component."""
    prior = model.prior
    if isinstance(prior, VampPrior):
        comps = prior.encoder(prior.pseudo_input_values())
        means, log_vars = comps.mean.data, comps.log_var.data
    elif isinstance(prior, MixtureOfGaussians):
        means, log_vars = prior.means.data, prior.log_vars.data
    else:
        raise ContractError("component-conditioned generation needs a "
                            "mixture prior")
    if not 0 <= component < prior.k:
        raise ContractError(f"component {component} out of range for "
                            f"K={prior.k}")
    picked = DiagGaussian(
        Tensor(np.tile(means[component], (n, 1))),
        Tensor(np.tile(log_vars[component], (n, 1))))
    top_dim = model.spec.top_latent
    eps = Tensor(rng.standard_normal((n, top_dim)))
    z_top = sample_reparam(picked, eps).data
    labels = np.full(n, component)
    if isinstance(model, Vae):
        x = model.decode(Tensor(z_top)).mean_value()
        return Generation(x, z_top, components=labels)
    return _decode_from_z2(model, z_top, rng, labels)


def reconstruct(x, model: Model, rng) -> np.ndarray:
    """Encode with one posterior sample and decode to the likelihood mean."""
    rec = model.forward(x, rng, mc_samples=1)
    if isinstance(model, Vae):
        return model.decode(rec.z).mean_value()
    return model.decode(rec.z1, rec.z2).mean_value()


def set_parameters(model: Model, state: dict[str, np.ndarray]) -> None:
    """Overwrite all model parameters from a name -> array snapshot."""
    params = model.parameters()
    if set(params) != set(state):
        raise ContractError("parameter snapshot does not match the model")
    for name, t in params.items():
        if tuple(t.shape) != tuple(state[name].shape):
            raise ContractError(f"snapshot tensor '{name}' has shape "
                                f"{state[name].shape}, expected {t.shape}")
        t.data = np.array(state[name], dtype=np.float64)


# -- checkpoint persistence ------------------------------------------------

def save_checkpoint(model: Model, path) -> None:
    """Write magic, version, JSON spec + tensor manifest, raw f64 payloads."""
    params = model.parameters()
    manifest = [[name, list(t.shape)] for name, t in params.items()]
    header = json.dumps({"spec": model.spec.to_dict(), "tensors": manifest},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, t in params.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    """Rebuild a model from a checkpoint; bitwise inverse of save."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    if len(blob) < 8:
        raise FormatError("truncated checkpoint header", offset=4)
    version = struct.unpack("<I", blob[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} "
                          f"(expected {CHECKPOINT_VERSION})", offset=4)
    if len(blob) < 12:
        raise FormatError("truncated checkpoint header", offset=8)
    header_len = struct.unpack("<I", blob[8:12])[0]
    if len(blob) < 12 + header_len:
        raise FormatError("truncated checkpoint metadata", offset=12)
    try:
        meta = json.loads(blob[12:12 + header_len].decode("utf-8"))
        spec = ModelSpec.from_dict(meta["spec"])
        manifest = meta["tensors"]
    except (ValueError, KeyError, TypeError, ContractError) as exc:
        raise FormatError(f"bad checkpoint metadata: {exc}", offset=12) from exc

    offset = 12 + header_len
    arrays: dict[str, np.ndarray] = {}
    for name, shape in manifest:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if len(blob) < offset + nbytes:
            raise FormatError(f"truncated payload for tensor '{name}'",
                              offset=offset)
        arrays[name] = np.frombuffer(
            blob, dtype="<f8", count=count,
            offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise FormatError("trailing bytes after checkpoint payload",
                          offset=offset)

    rng = np.random.default_rng(0)
    placeholder = None
    if spec.prior_kind == "vamp-data":
        placeholder = np.zeros((spec.prior_components, spec.data_dim))
    model = build_model(spec, rng, data_rows=placeholder)
    params = model.parameters()
    if set(params) != set(arrays):
        raise FormatError("checkpoint tensor manifest does not match the "
                          "model architecture", offset=12)
    for name, t in params.items():
        if tuple(t.shape) != tuple(arrays[name].shape):
            raise FormatError(f"tensor '{name}' has shape "
                              f"{arrays[name].shape}, expected {t.shape}",
                              offset=12)
        t.data = arrays[name]
    return model
