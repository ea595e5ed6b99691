"""The ProCC network over a ParamStore.

Layout of parameter names::

    backbone.weight                raw_dim x d
    phi_o.layer{i}.weight / .bias  object MLP head
    phi_s.layer{i}.weight / .bias  state MLP head
    cpc_o_to_s.kernel / .proj      object representation -> state compatibility
    cpc_s_to_o.kernel / .proj      state representation -> object compatibility
"""

from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .numkernel import ParamStore, ShapeError, Tape, autograd as ag, ops

GROUPS = ("backbone", "phi_o", "phi_s", "cpc_o_to_s", "cpc_s_to_o")
CHECKPOINT_HEADER = "procc v1"


def kernel_size_for(d, fraction):
    return ops.resolve_kernel_size(round(float(Fraction(str(fraction))) * d), d)


@dataclass(frozen=True)
class ModelConfig:
    raw_dim: int
    n_states: int
    n_objects: int
    d: int = 64
    n_layers: int = 3
    cpm_kernel_fraction: str = "1/2"
    cpm_kernel_size: int = 0  # 0 = derive from the fraction
    alpha: float = 1.0
    trainable_backbone: bool = False
    backbone: str = "random"  # "random" projection or "identity"

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if self.backbone not in ("random", "identity"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.backbone == "identity" and self.raw_dim != self.d:
            raise ValueError("identity backbone needs raw_dim == d")

    @property
    def kernel_size(self):
        if self.cpm_kernel_size:
            return ops.resolve_kernel_size(self.cpm_kernel_size, self.d)
        return kernel_size_for(self.d, self.cpm_kernel_fraction)


@dataclass(frozen=True)
class MlpHead:
    prefix: str
    n_layers: int

    def layer_names(self, i):
        return f"{self.prefix}.layer{i + 1}.weight", f"{self.prefix}.layer{i + 1}.bias"

    def forward(self, tape, x):
        """Return ``(penultimate activation, logits)``."""
        h = x
        for i in range(self.n_layers):
            w, b = self.layer_names(i)
            z = ag.add(ag.matmul(h, tape.param(w)), tape.param(b))
            if i == self.n_layers - 1:
                return h, z
            h = ag.relu(z)


@dataclass(frozen=True)
class CpmUnit:
    prefix: str  # "cpc_o_to_s" or "cpc_s_to_o"

    @property
    def direction(self):
        return "o->s" if self.prefix == "cpc_o_to_s" else "s->o"

    def logits(self, tape, cond):
        """Compatibility logits; softmax of these is the compatibility vector."""
        conv = ag.conv1d_rows(cond, tape.param(f"{self.prefix}.kernel"))
        return ag.matmul(conv, tape.param(f"{self.prefix}.proj"))


class ForwardOut(NamedTuple):
    state_logits: ag.Var
    object_logits: ag.Var
    cond_state_logits: ag.Var
    cond_object_logits: ag.Var
    h_state: ag.Var
    h_object: ag.Var


class ProCCModel:
    def __init__(self, config, params=None):
        self.config = config
        self.phi_o = MlpHead("phi_o", config.n_layers)
        self.phi_s = MlpHead("phi_s", config.n_layers)
        self.cpc_o_to_s = CpmUnit("cpc_o_to_s")
        self.cpc_s_to_o = CpmUnit("cpc_s_to_o")
        self.params = params if params is not None else ParamStore()
        self.stages_completed = 0

    @property
    def alpha(self):
        return self.config.alpha

    def group(self, name):
        return self.params.names(name)

    def shapes(self):
        c = self.config
        out = {"backbone.weight": (c.raw_dim, c.d)}
        for head, n_out in ((self.phi_o, c.n_objects), (self.phi_s, c.n_states)):
            for i in range(c.n_layers):
                w, b = head.layer_names(i)
                width = n_out if i == c.n_layers - 1 else c.d
                out[w] = (c.d, width)
                out[b] = (1, width)
        k = c.kernel_size
        out["cpc_o_to_s.kernel"] = (1, k)
        out["cpc_o_to_s.proj"] = (c.d, c.n_states)
        out["cpc_s_to_o.kernel"] = (1, k)
        out["cpc_s_to_o.proj"] = (c.d, c.n_objects)
        return out

    def embed(self, tape, raw):
        """Backbone projection; a constant unless the backbone is trainable."""
        x = tape.constant(raw)
        if x.shape[1] != self.config.raw_dim:
            raise ShapeError(f"raw feature width {x.shape[1]} != backbone input {self.config.raw_dim}")
        w = tape.param("backbone.weight") if self.config.trainable_backbone else ag.Var(
            self.params.values["backbone.weight"], tape)
        return ag.matmul(x, w)

    def forward(self, tape, raw, detach_object=False, detach_state=False):
        e = self.embed(tape, raw)
        h_o, lo = self.phi_o.forward(tape, e)
        h_s, ls = self.phi_s.forward(tape, e)
        cond_o = ag.detach(h_o) if detach_object else h_o
        cond_s = ag.detach(h_s) if detach_state else h_s
        a = self.alpha
        # softmax(base) * softmax(z)^a renormalised == softmax(base + a*z)
        cs = ag.add(ls, ag.scale(self.cpc_o_to_s.logits(tape, cond_o), a))
        co = ag.add(lo, ag.scale(self.cpc_s_to_o.logits(tape, cond_s), a))
        return ForwardOut(ls, lo, cs, co, h_s, h_o)


def init_model(config, seed):
    """Fresh model: He-normal weights, zero biases, seeded."""
    rng = np.random.default_rng(seed)
    model = ProCCModel(config)
    for name, shape in model.shapes().items():
        if name == "backbone.weight":
            if config.backbone == "identity":
                value = np.eye(config.d)
            else:
                value = rng.standard_normal(shape) / np.sqrt(shape[0])
        elif name.endswith(".bias"):
            value = np.zeros(shape)
        else:
            fan_in = shape[1] if name.endswith(".kernel") else shape[0]
            value = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        model.params.add(name, value)
    return model


def _frozen_tape(model):
    return Tape(model.params, trainable=())


def _rows(x):
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def backbone_embed(model, raw_feature):
    out = model.embed(_frozen_tape(model), _rows(raw_feature)).value
    return out[0] if np.ndim(raw_feature) == 1 else out


def classify_primitive(model, head, embedding):
    e = _rows(embedding)
    if e.shape[1] != model.config.d:
        raise ShapeError(f"embedding width {e.shape[1]} != d={model.config.d}")
    tape = _frozen_tape(model)
    _, logits = head.forward(tape, tape.constant(e))
    return logits.value[0] if np.ndim(embedding) == 1 else logits.value


def cpm_compatibility(model, unit, conditioning_repr):
    r = _rows(conditioning_repr)
    if r.shape[1] != model.config.d:
        raise ShapeError(f"conditioning width {r.shape[1]} != d={model.config.d}")
    tape = _frozen_tape(model)
    p = ops.softmax(unit.logits(tape, tape.constant(r)).value, axis=1)
    return p[0] if np.ndim(conditioning_repr) == 1 else p


def conditioned_probs(base_logits, compatibility, alpha):
    """``softmax(base) * compatibility**alpha``, renormalised."""
    base = np.asarray(base_logits, dtype=np.float64)
    comp = np.asarray(compatibility, dtype=np.float64)
    if base.shape != comp.shape:
        raise ShapeError(f"length mismatch {base.shape} vs {comp.shape}")
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must be in [0, 1]")
    p = ops.softmax(np.atleast_2d(base), axis=1) * np.atleast_2d(comp) ** alpha
    p = p / p.sum(axis=1, keepdims=True)
    return p.reshape(base.shape)


def forward_composition(model, embedding, use_cpc=True):
    """Primitive distributions for embeddings.

    Returns ``(p_state, p_object, (h_object, h_state))``; the pair holds the
    penultimate representations the CPM units condition on.
    """
    e = _rows(embedding)
    if e.shape[1] != model.config.d:
        raise ShapeError(f"embedding width {e.shape[1]} != d={model.config.d}")
    tape = _frozen_tape(model)
    x = tape.constant(e)
    h_o, lo = model.phi_o.forward(tape, x)
    h_s, ls = model.phi_s.forward(tape, x)
    if use_cpc:
        ps = conditioned_probs(ls.value, ops.softmax(model.cpc_o_to_s.logits(tape, h_o).value), model.alpha)
        po = conditioned_probs(lo.value, ops.softmax(model.cpc_s_to_o.logits(tape, h_s).value), model.alpha)
    else:
        ps, po = ops.softmax(ls.value), ops.softmax(lo.value)
    if np.ndim(embedding) == 1:
        return ps[0], po[0], (h_o.value[0], h_s.value[0])
    return ps, po, (h_o.value, h_s.value)


def primitive_probs(model, raw, use_cpc=True):
    """Batched ``(p_state, p_object)`` from raw features, via the stable log-space path."""
    out = model.forward(_frozen_tape(model), _rows(raw))
    if use_cpc:
        return ops.softmax(out.cond_state_logits.value), ops.softmax(out.cond_object_logits.value)
    return ops.softmax(out.state_logits.value), ops.softmax(out.object_logits.value)


def composition_scores(p_state, p_object, space_mask):
    """Outer product of primitive probabilities; masked cells are ``-inf``.

    Accepts single vectors (-> |S| x |O|) or batches (-> n x |S| x |O|).
    """
    ps = np.asarray(p_state, dtype=np.float64)
    po = np.asarray(p_object, dtype=np.float64)
    mask = np.asarray(space_mask, dtype=bool)
    if mask.shape != (ps.shape[-1], po.shape[-1]):
        raise ShapeError(f"mask shape {mask.shape} != ({ps.shape[-1]}, {po.shape[-1]})")
    scores = ps[..., :, None] * po[..., None, :]
    return np.where(mask, scores, -np.inf)


def rank_pairs(scores, seen_mask, bias, k):
    """Top-k (state, object, score) of one score grid after adding ``bias`` to unseen cells."""
    scores = np.asarray(scores, dtype=np.float64)
    finite = np.isfinite(scores)
    n_open = int(finite.sum())
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n_open:
        raise ValueError(f"k={k} exceeds the {n_open} unmasked pairs")
    biased = np.where(finite & ~np.asarray(seen_mask, dtype=bool), scores + bias, scores)
    flat = biased.ravel()
    # stable sort on the negated score keeps (state, object) ascending among ties
    order = np.argsort(-flat, kind="stable")[:k]
    n_o = scores.shape[1]
    return [(int(i // n_o), int(i % n_o), float(flat[i])) for i in order]


def predict_topk(model, embedding, space_mask, seen_pairs, bias, k, use_cpc=True):
    ps, po, _ = forward_composition(model, embedding, use_cpc)
    scores = composition_scores(ps, po, space_mask)
    seen = np.zeros(scores.shape, dtype=bool)
    for s, o in seen_pairs:
        seen[s, o] = True
    return rank_pairs(scores, seen, bias, k)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path):
    names = list(model.shapes())
    lines = [CHECKPOINT_HEADER, f"stages_completed {model.stages_completed}"]
    for name in names:
        r, c = model.params.values[name].shape
        lines.append(f"param {name} {r} {c}")
    lines.append("values")
    for name in names:
        lines.extend(repr(float(v)) for v in model.params.values[name].ravel())
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path, config):
    """Rebuild a model from ``config`` and fill it from a checkpoint, checking every shape."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not a {CHECKPOINT_HEADER!r} checkpoint")
    model = ProCCModel(config)
    expected = model.shapes()
    pos = 1
    if lines[pos].startswith("stages_completed "):
        model.stages_completed = int(lines[pos].split()[1])
        pos += 1
    declared = []
    while lines[pos] != "values":
        tag, name, r, c = lines[pos].split()
        if tag != "param":
            raise ValueError(f"{path}: bad manifest line {lines[pos]!r}")
        declared.append((name, (int(r), int(c))))
        pos += 1
    pos += 1
    if dict(declared) != expected:
        raise ValueError(f"{path}: parameter shapes do not match the model configuration")
    for name, (r, c) in declared:
        n = r * c
        vals = np.array([float(v) for v in lines[pos:pos + n]], dtype=np.float64)
        if vals.size != n:
            raise ValueError(f"{path}: truncated values for {name}")
        model.params.add(name, vals.reshape(r, c))
        pos += n
    if pos != len(lines):
        raise ValueError(f"{path}: trailing data after values")
    return model


def config_to_dict(config):
    return asdict(config)


def config_from_dict(d):
    names = {f.name: f.type for f in fields(ModelConfig)}
    kwargs = {}
    for k, v in d.items():
        if k not in names:
            raise KeyError(f"unknown model key {k!r}")
        kwargs[k] = v
    return ModelConfig(**kwargs)
