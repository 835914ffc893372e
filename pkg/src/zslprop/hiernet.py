"""Small fully-connected hierarchical classifier with a gradient-reversal domain head.

Architecture::

    x -> trunk[0] -> trunk[1] -> ... -> trunk[L-1]      (ReLU after every layer)
              |          |                 |
           family      genus            species          (hidden ReLU + linear)
                                           |
                                     [reversal] -> domain head (2 hidden ReLU + 2-way linear)

Family, genus and species heads read the trunk at increasing depth. The
domain head reads the species head's hidden layer by default. On the way
back, the gradient leaving the domain head is multiplied by ``-mu_d``
before it reaches shared parameters, while the domain head itself descends
its own cross-entropy.

Everything is plain numpy with hand-written backward passes.
"""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, NonFiniteError

HEADS = ("family", "genus", "species")
GROUPS = ("trunk", "family", "genus", "species", "domain")
DOMAIN_SOURCES = ("species_head", "species_tap")
SOURCE, TARGET = 0, 1


@dataclass
class TrainConfig:
    mu_f: float = 1.0
    mu_g: float = 1.0
    mu_d: float = 0.1
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 20
    seed: int = 0
    epochs: int = 50

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidInputError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise InvalidInputError(f"momentum must lie in [0, 1), got {self.momentum}")
        if min(self.mu_f, self.mu_g, self.mu_d) < 0:
            raise InvalidInputError("loss weights must be nonnegative")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be positive")


@dataclass
class HierNetParams:
    """Weights of every layer, grouped by sub-network.

    Each group is a list of ``[W, b]`` pairs with ``W`` of shape
    ``(out, in)``. ``taps`` holds the trunk-layer indices read by the
    family, genus and species heads.
    """

    trunk: list
    family: list
    genus: list
    species: list
    domain: list
    taps: tuple = (0, 1, 2)
    domain_source: str = "species_head"

    def __post_init__(self):
        self.taps = tuple(int(t) for t in self.taps)
        if len(self.taps) != 3 or not (self.taps[0] < self.taps[1] < self.taps[2]):
            raise InvalidInputError(f"taps must be three strictly increasing indices, got {self.taps}")
        if self.taps[0] < 0 or self.taps[2] >= len(self.trunk):
            raise InvalidInputError(f"taps {self.taps} fall outside a trunk of depth {len(self.trunk)}")
        if self.domain_source not in DOMAIN_SOURCES:
            raise InvalidInputError(f"domain_source must be one of {DOMAIN_SOURCES}")
        self._check_shapes()

    def _check_shapes(self):
        def chain(layers, in_dim, name):
            for i, (W, b) in enumerate(layers):
                if W.shape[1] != in_dim or b.shape != (W.shape[0],):
                    raise InvalidInputError(f"{name}[{i}] has shape {W.shape}/{b.shape}, expected input {in_dim}")
                in_dim = W.shape[0]
            return in_dim

        widths = []
        d = self.input_dim
        for i, layer in enumerate(self.trunk):
            d = chain([layer], d, f"trunk{i}")
            widths.append(d)
        for name, t in zip(HEADS, self.taps):
            chain(getattr(self, name), widths[t], name)
        src = self.species[-2][0].shape[0] if self.domain_source == "species_head" else widths[self.taps[2]]
        chain(self.domain, src, "domain")

    @property
    def input_dim(self) -> int:
        return self.trunk[0][0].shape[1]

    def group(self, name) -> list:
        return getattr(self, name)

    def arrays(self):
        """Yield ``(name, array)`` for every parameter in a fixed order."""
        for g in GROUPS:
            for i, (W, b) in enumerate(self.group(g)):
                yield f"{g}.{i}.W", W
                yield f"{g}.{i}.b", b

    @property
    def n_params(self) -> int:
        return sum(a.size for _, a in self.arrays())

    def zeros_like(self) -> "HierNetParams":
        out = copy.deepcopy(self)
        for _, a in out.arrays():
            a[...] = 0.0
        return out

    def copy(self) -> "HierNetParams":
        return copy.deepcopy(self)

    def penultimate_widths(self) -> tuple:
        return tuple(self.group(h)[-2][0].shape[0] for h in ("species", "genus", "family"))

    def to_dict(self) -> dict:
        doc = {"taps": list(self.taps), "domain_source": self.domain_source, "groups": {}}
        for g in GROUPS:
            doc["groups"][g] = [
                {"shape": list(W.shape), "W": W.ravel(order="C").tolist(), "b": b.tolist()}
                for W, b in self.group(g)
            ]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "HierNetParams":
        groups = {}
        for g in GROUPS:
            groups[g] = [
                [np.asarray(layer["W"], dtype=float).reshape(layer["shape"]),
                 np.asarray(layer["b"], dtype=float)]
                for layer in doc["groups"][g]
            ]
        return cls(taps=tuple(doc["taps"]), domain_source=doc["domain_source"], **groups)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "HierNetParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _layer(rng, n_in, n_out):
    bound = np.sqrt(6.0 / n_in)
    return [rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out)]


def init_params(input_dim: int, n_family: int, n_genus: int, n_species: int, *,
                trunk_widths: Sequence[int] = (32, 32, 32), head_hidden: int = 16,
                domain_hidden: Sequence[int] = (16, 16), taps: Sequence[int] | None = None,
                domain_source: str = "species_head", seed: int = 0) -> HierNetParams:
    """Random initialisation, uniform in ``+-sqrt(6 / fan_in)`` with zero biases."""
    rng = np.random.default_rng(seed)
    if taps is None:
        L = len(trunk_widths)
        taps = (L - 3, L - 2, L - 1)
    trunk, d = [], input_dim
    for w in trunk_widths:
        trunk.append(_layer(rng, d, w))
        d = w
    heads = {}
    for name, t, n_out in zip(HEADS, taps, (n_family, n_genus, n_species)):
        heads[name] = [_layer(rng, trunk_widths[t], head_hidden), _layer(rng, head_hidden, n_out)]
    d = head_hidden if domain_source == "species_head" else trunk_widths[taps[2]]
    domain = []
    for w in domain_hidden:
        domain.append(_layer(rng, d, w))
        d = w
    domain.append(_layer(rng, d, 2))
    return HierNetParams(trunk=trunk, domain=domain, taps=tuple(taps), domain_source=domain_source, **heads)


# --------------------------------------------------------------------------- forward

def _relu(z):
    return np.maximum(z, 0.0)


def _mlp(layers, h, cache):
    """Hidden layers use ReLU, the last layer is linear. Appends (input, pre-activation) to cache."""
    for i, (W, b) in enumerate(layers):
        z = h @ W.T + b
        cache.append((h, z))
        h = z if i == len(layers) - 1 else _relu(z)
    return h


@dataclass
class ForwardOutput:
    family_logits: np.ndarray
    genus_logits: np.ndarray
    species_logits: np.ndarray
    domain_logits: np.ndarray
    head_penultimates: dict
    cache: dict = field(default=None, repr=False)

    def logits(self, head) -> np.ndarray:
        return getattr(self, f"{head}_logits")


def forward(x, params: HierNetParams) -> ForwardOutput:
    """Forward pass for one vector or a batch of row vectors.

    Returned arrays keep the batch axis only when ``x`` is 2-D.
    """
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise InvalidInputError(f"input dimension {X.shape[-1]} != network input {params.input_dim}")

    trunk_cache, acts, h = [], [], X
    for W, b in params.trunk:
        z = h @ W.T + b
        trunk_cache.append((h, z))
        h = _relu(z)
        acts.append(h)

    head_cache, logits, penult = {}, {}, {}
    for name, t in zip(HEADS, params.taps):
        c = []
        logits[name] = _mlp(params.group(name), acts[t], c)
        head_cache[name] = c
        penult[name] = c[-1][0]

    src = penult["species"] if params.domain_source == "species_head" else acts[params.taps[2]]
    dcache = []
    # reversal layer is the identity going forward
    dlogits = _mlp(params.domain, src, dcache)

    cache = {"trunk": trunk_cache, "acts": acts, "heads": head_cache, "domain": dcache}
    if single:
        return ForwardOutput(logits["family"][0], logits["genus"][0], logits["species"][0],
                             dlogits[0], {k: v[0] for k, v in penult.items()}, cache)
    return ForwardOutput(logits["family"], logits["genus"], logits["species"], dlogits, penult, cache)


def extract_features(x, params: HierNetParams) -> np.ndarray:
    """Species, genus and family penultimate activations, concatenated in that order."""
    out = forward(x, params)
    pen = out.head_penultimates
    return np.concatenate([pen["species"], pen["genus"], pen["family"]], axis=-1)


# --------------------------------------------------------------------------- losses

def log_softmax(z):
    z = np.asarray(z, dtype=float)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))


def cross_entropy(logits, label) -> float:
    return float(-log_softmax(logits)[label])


@dataclass(frozen=True)
class HierSample:
    x: np.ndarray
    y_f: int | None = None
    y_g: int | None = None
    y_s: int | None = None
    y_d: int = SOURCE

    @property
    def labeled(self) -> bool:
        return self.y_s is not None


@dataclass
class HierBatch:
    """Array form of a list of samples; unlabeled rows carry ``-1`` labels."""

    X: np.ndarray
    y_f: np.ndarray
    y_g: np.ndarray
    y_s: np.ndarray
    y_d: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[HierSample]) -> "HierBatch":
        if not samples:
            raise InvalidInputError("batch is empty")
        lab = lambda v: -1 if v is None else int(v)
        return cls(
            X=np.vstack([np.asarray(s.x, dtype=float) for s in samples]),
            y_f=np.array([lab(s.y_f) for s in samples]),
            y_g=np.array([lab(s.y_g) for s in samples]),
            y_s=np.array([lab(s.y_s) for s in samples]),
            y_d=np.array([int(s.y_d) for s in samples]),
        )

    def __len__(self):
        return self.X.shape[0]

    def take(self, idx) -> "HierBatch":
        return HierBatch(self.X[idx], self.y_f[idx], self.y_g[idx], self.y_s[idx], self.y_d[idx])

    @property
    def labeled(self) -> np.ndarray:
        return self.y_s >= 0


def hierarchical_loss(sample: HierSample, outputs: ForwardOutput, config: TrainConfig) -> float:
    """``mu_f * CE_family + mu_g * CE_genus + CE_species`` for one labeled sample."""
    if sample.y_f is None or sample.y_g is None or sample.y_s is None:
        raise InvalidInputError("hierarchical loss needs family, genus and species labels")
    return (config.mu_f * cross_entropy(outputs.family_logits, sample.y_f)
            + config.mu_g * cross_entropy(outputs.genus_logits, sample.y_g)
            + cross_entropy(outputs.species_logits, sample.y_s))


def domain_loss(sample: HierSample, outputs: ForwardOutput) -> float:
    return cross_entropy(outputs.domain_logits, sample.y_d)


def total_loss(sample: HierSample, outputs: ForwardOutput, config: TrainConfig) -> float:
    """Hierarchical loss minus ``mu_d`` times the domain loss; unlabeled samples keep only the domain part."""
    lh = hierarchical_loss(sample, outputs, config) if sample.labeled else 0.0
    return lh - config.mu_d * domain_loss(sample, outputs)


def batch_losses(batch: HierBatch, params: HierNetParams, config: TrainConfig,
                 out: ForwardOutput | None = None) -> dict:
    """Per-sample loss components for a batch (arrays of length N)."""
    if out is None:
        out = forward(batch.X, params)
    lab = batch.labeled
    N = len(batch)
    per = {}
    for head, y, mu in (("family", batch.y_f, config.mu_f), ("genus", batch.y_g, config.mu_g),
                        ("species", batch.y_s, 1.0)):
        ls = log_softmax(out.logits(head))
        ce = np.zeros(N)
        ce[lab] = -ls[np.flatnonzero(lab), y[lab]]
        per[head] = ce
    ld = -log_softmax(out.domain_logits)[np.arange(N), batch.y_d]
    lh = config.mu_f * per["family"] + config.mu_g * per["genus"] + per["species"]
    return {"family": per["family"], "genus": per["genus"], "species": per["species"],
            "hierarchical": lh, "domain": ld, "total": lh - config.mu_d * ld, "labeled": lab}


# --------------------------------------------------------------------------- backward

def _mlp_backward(layers, cache, grad_out, grads):
    """Backprop through an MLP built by ``_mlp``; fills ``grads`` and returns d(input)."""
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        h, z = cache[i]
        if i != len(layers) - 1:
            g = g * (z > 0)
        W = layers[i][0]
        grads[i][0] += g.T @ h
        grads[i][1] += g.sum(axis=0)
        g = g @ W
    return g


@dataclass
class Gradients:
    # d mean(L_h - mu_d * L_d) for trunk and heads; its domain group stays zero
    shared: HierNetParams
    # d mean(L_d) for the domain head; only its domain group is filled
    domain: HierNetParams
    losses: dict
    # d mean(L_d) / d(domain-head input), before reversal
    domain_feature_grad: np.ndarray = field(default=None, repr=False)


def backward(batch: HierBatch, params: HierNetParams, config: TrainConfig,
             reverse: bool = True) -> Gradients:
    """Gradients of the batch-mean objectives.

    With ``reverse=False`` the domain gradient enters the shared layers with
    weight ``+1`` instead of ``-mu_d``; only used to test the reversal.
    """
    out = forward(batch.X, params)
    cache = out.cache
    losses = batch_losses(batch, params, config, out)
    N = len(batch)
    lab = batch.labeled
    rows = np.flatnonzero(lab)

    g_shared = params.zeros_like()
    g_domain = params.zeros_like()

    # domain head: descends its own loss
    pd = np.exp(log_softmax(out.domain_logits))
    pd[np.arange(N), batch.y_d] -= 1.0
    pd /= N
    g_src = _mlp_backward(params.domain, cache["domain"], pd, g_domain.domain)
    rev = -config.mu_d if reverse else 1.0
    g_src_rev = rev * g_src

    acts_grad = [np.zeros_like(a) for a in cache["acts"]]
    for name, t, mu, y in (("family", params.taps[0], config.mu_f, batch.y_f),
                           ("genus", params.taps[1], config.mu_g, batch.y_g),
                           ("species", params.taps[2], 1.0, batch.y_s)):
        layers = params.group(name)
        hc = cache["heads"][name]
        d = np.exp(log_softmax(out.logits(name)))
        d[~lab] = 0.0
        d[rows, y[rows]] -= 1.0
        d *= mu / N
        gl = g_shared.group(name)
        # output layer
        h_pen, _ = hc[-1]
        gl[-1][0] += d.T @ h_pen
        gl[-1][1] += d.sum(axis=0)
        g_pen = d @ layers[-1][0]
        if name == "species" and params.domain_source == "species_head":
            g_pen = g_pen + g_src_rev
        acts_grad[t] += _hidden_backward(layers[:-1], hc[:-1], g_pen, gl[:-1])
    if params.domain_source == "species_tap":
        acts_grad[params.taps[2]] += g_src_rev

    g = np.zeros_like(cache["acts"][-1])
    for i in range(len(params.trunk) - 1, -1, -1):
        g = g + acts_grad[i]
        h, z = cache["trunk"][i]
        g = g * (z > 0)
        g_shared.trunk[i][0] += g.T @ h
        g_shared.trunk[i][1] += g.sum(axis=0)
        g = g @ params.trunk[i][0]

    return Gradients(shared=g_shared, domain=g_domain, losses=losses, domain_feature_grad=g_src)


def _hidden_backward(layers, cache, grad_act, grads):
    """Backprop through ReLU-activated layers given d(last activation)."""
    g = grad_act
    for i in range(len(layers) - 1, -1, -1):
        h, z = cache[i]
        g = g * (z > 0)
        grads[i][0] += g.T @ h
        grads[i][1] += g.sum(axis=0)
        g = g @ layers[i][0]
    return g


def shared_objective(batch: HierBatch, params: HierNetParams, config: TrainConfig) -> float:
    l = batch_losses(batch, params, config)
    return float(np.mean(l["hierarchical"] - config.mu_d * l["domain"]))


def domain_objective(batch: HierBatch, params: HierNetParams, config: TrainConfig) -> float:
    return float(np.mean(batch_losses(batch, params, config)["domain"]))


# --------------------------------------------------------------------------- training

@dataclass
class MomentumState:
    velocity: HierNetParams

    @classmethod
    def zeros(cls, params: HierNetParams) -> "MomentumState":
        return cls(params.zeros_like())


def train_step(batch, params: HierNetParams, config: TrainConfig,
               state: MomentumState | None = None):
    """One SGD-with-momentum step on ``batch``.

    Returns ``(new_params, new_state, losses)``; inputs are not modified.
    Raises NonFiniteError naming the offending loss term or gradient group.
    """
    if not isinstance(batch, HierBatch):
        batch = HierBatch.from_samples(list(batch))
    if len(batch) == 0:
        raise InvalidInputError("batch is empty")
    if state is None:
        state = MomentumState.zeros(params)
    # non-finite values are reported below instead of warned about
    with np.errstate(invalid="ignore", over="ignore"):
        grads = backward(batch, params, config)
    for term in ("hierarchical", "domain"):
        if not np.all(np.isfinite(grads.losses[term])):
            raise NonFiniteError(f"non-finite {term} loss", term=term)

    new_params = params.copy()
    velocity = state.velocity.copy()
    for g in GROUPS:
        src = grads.domain if g == "domain" else grads.shared
        for (W, b), (vW, vb), (gW, gb) in zip(new_params.group(g), velocity.group(g), src.group(g)):
            if not (np.all(np.isfinite(gW)) and np.all(np.isfinite(gb))):
                raise NonFiniteError(f"non-finite gradient in {g} parameters", term=g)
            vW *= config.momentum
            vW -= config.learning_rate * gW
            vb *= config.momentum
            vb -= config.learning_rate * gb
            W += vW
            b += vb
    for name, a in new_params.arrays():
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"parameter {name} became non-finite", term=name)
    return new_params, MomentumState(velocity), grads.losses


def mean_hierarchical_loss(batch: HierBatch, params: HierNetParams, config: TrainConfig) -> float:
    l = batch_losses(batch, params, config)
    lab = l["labeled"]
    return float(np.mean(l["hierarchical"][lab])) if lab.any() else 0.0


def train(data: HierBatch, params: HierNetParams, config: TrainConfig, epochs: int | None = None):
    """Minibatch training for ``epochs`` passes over ``data`` in a seeded order.

    Returns ``(params, history)`` where ``history[e]`` is the mean
    hierarchical loss over labeled rows before epoch ``e`` (last entry is
    after the final epoch).
    """
    epochs = config.epochs if epochs is None else epochs
    rng = np.random.default_rng(config.seed)
    state = MomentumState.zeros(params)
    history = [mean_hierarchical_loss(data, params, config)]
    n = len(data)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            params, state, _ = train_step(data.take(order[start:start + config.batch_size]),
                                          params, config, state)
        history.append(mean_hierarchical_loss(data, params, config))
    return params, history


# --------------------------------------------------------------------------- hierarchy

class Hierarchy:
    """species -> genus -> family mapping with stable integer indices per level."""

    def __init__(self, rows: Sequence[tuple]):
        self.genus_of, self.family_of = {}, {}
        for species, genus, family in rows:
            if species in self.genus_of:
                raise InvalidInputError(f"species {species!r} listed twice in hierarchy")
            if genus in self.family_of and self.family_of[genus] != family:
                raise InvalidInputError(f"genus {genus!r} belongs to two families")
            self.genus_of[species] = genus
            self.family_of[genus] = family
        self.species = tuple(self.genus_of)
        self.genera = tuple(dict.fromkeys(self.genus_of.values()))
        self.families = tuple(dict.fromkeys(self.family_of.values()))

    @classmethod
    def from_csv(cls, path) -> "Hierarchy":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            need = {"species_id", "genus_id", "family_id"}
            if not need <= set(reader.fieldnames or ()):
                raise InvalidInputError(f"{path}: hierarchy header must contain {sorted(need)}")
            return cls([(r["species_id"], r["genus_id"], r["family_id"]) for r in reader])

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["species_id", "genus_id", "family_id"])
            for s in self.species:
                w.writerow([s, self.genus_of[s], self.family_of[self.genus_of[s]]])

    def labels_for(self, species_id, species_index: dict) -> tuple:
        """(family, genus, species) indices for ``species_id``."""
        if species_id not in self.genus_of:
            raise InvalidInputError(f"species {species_id!r} missing from hierarchy")
        g = self.genus_of[species_id]
        return (self.families.index(self.family_of[g]), self.genera.index(g), species_index[species_id])
