"""Finite-difference checks over every trainable component and loss."""

import numpy as np

from .dataio import Batch
from .model import ModelConfig, init_model
from .numkernel import finite_diff_check
from .train import loss_obj, loss_state_con, loss_vp_con

TOLERANCE = 1e-4


def _max_err(params, names, fn):
    return max(finite_diff_check(params, n, fn) for n in names)


def run_grad_checks(seed=0, n_samples=4):
    """Return ``[(component, max_rel_err), ...]`` on a seeded random instance.

    The model uses a trainable backbone so that every parameter group is
    reachable; the batch holds ``n_samples`` fully labeled records.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(raw_dim=6, n_states=4, n_objects=3, d=6, n_layers=3, trainable_backbone=True)
    model = init_model(cfg, seed)
    p = model.params
    batch = Batch(rng.normal(size=(n_samples, cfg.raw_dim)), rng.integers(0, cfg.n_states, n_samples),
                  rng.integers(0, cfg.n_objects, n_samples))

    def vp(tape):
        return loss_vp_con(model, batch, tape)

    checks = []
    for head in ("phi_o", "phi_s"):
        for i in range(1, cfg.n_layers + 1):
            names = [f"{head}.layer{i}.weight", f"{head}.layer{i}.bias"]
            checks.append((f"{head}.layer{i}", _max_err(p, names, vp)))
    for unit in ("cpc_o_to_s", "cpc_s_to_o"):
        checks.append((f"{unit}.conv", _max_err(p, [f"{unit}.kernel"], vp)))
        checks.append((f"{unit}.proj", _max_err(p, [f"{unit}.proj"], vp)))
    checks.append(("backbone", _max_err(p, ["backbone.weight"], vp)))

    obj_names = model.group("backbone") + model.group("phi_o")
    checks.append(("loss_obj", _max_err(p, obj_names, lambda t: loss_obj(model, batch, t))))
    # the stage-2 stop-gradient on h_o is a training choice; the end-to-end
    # check differentiates the loss as a plain function of every parameter
    scope = model.group("phi_s") + model.group("cpc_o_to_s")
    checks.append(("loss_state_con.stage2_scope", _max_err(p, scope, lambda t: loss_state_con(model, batch, t))))
    checks.append(("loss_state_con", _max_err(
        p, p.names(), lambda t: loss_state_con(model, batch, t, detach_object=False))))
    checks.append(("loss_vp_con", _max_err(p, p.names(), vp)))
    return checks
