"""Losses and the three-stage progressive schedule (plus the joint variant)."""

import time
from dataclasses import dataclass, field

import numpy as np

from .dataio import Batch, batch_iterator
from .numkernel import OptimState, Tape, autograd as ag, optimizer_step


class StageOrderError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageConfig:
    stage: int
    lr: float = 1e-3
    max_epochs: int = 200
    batch_size: int = 128
    patience: int = 10
    optimizer: str = "adam"

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError("stage must be 1, 2 or 3")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.max_epochs < 0 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("need max_epochs >= 0, patience >= 1, batch_size >= 1")


@dataclass
class TrainReport:
    stage: str
    train_loss: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    epochs_run: int = 0
    wall_seconds: float = 0.0
    stop_reason: str = "not_run"
    best_epoch: int = -1

    def rows(self):
        return list(zip(range(1, self.epochs_run + 1), self.train_loss, self.val_metric, self.seconds))


# ---------------------------------------------------------------------------
# losses


def _tape(model, tape):
    return tape if tape is not None else Tape(model.params, trainable=())


def loss_obj(model, batch, tape=None):
    """Cross-entropy of the bare object head over object-labeled rows."""
    mask = batch.objects >= 0
    if not mask.any():
        raise ValueError("batch has no object-labeled records")
    tape = _tape(model, tape)
    e = model.embed(tape, batch.features)
    _, logits = model.phi_o.forward(tape, e)
    return ag.nll(ag.log_softmax(logits), batch.objects, mask)


def loss_state_con(model, batch, tape=None, detach_object=True):
    """Cross-entropy of the object-conditioned state distribution.

    With ``detach_object`` the object branch only supplies the conditioning
    signal and receives no gradient.
    """
    mask = batch.states >= 0
    if not mask.any():
        raise ValueError("batch has no state-labeled records")
    tape = _tape(model, tape)
    out = model.forward(tape, batch.features, detach_object=detach_object)
    return ag.nll(ag.log_softmax(out.cond_state_logits), batch.states, mask)


def _object_con_term(model, out, batch):
    return ag.nll(ag.log_softmax(out.cond_object_logits), batch.objects, batch.objects >= 0)


def loss_vp_con(model, batch, tape=None):
    """Conditioned state loss plus conditioned object loss, equally weighted."""
    s_mask, o_mask = batch.states >= 0, batch.objects >= 0
    if not (s_mask.any() or o_mask.any()):
        raise ValueError("batch has no labels")
    tape = _tape(model, tape)
    out = model.forward(tape, batch.features)
    ls = ag.nll(ag.log_softmax(out.cond_state_logits), batch.states, s_mask)
    return ag.add(ls, _object_con_term(model, out, batch))


# ---------------------------------------------------------------------------
# stages


def stage_scope(model, stage):
    if stage == 1:
        groups = ["phi_o"]
    elif stage == 2:
        groups = ["phi_s", "cpc_o_to_s"]
    else:
        groups = ["phi_o", "phi_s", "cpc_o_to_s", "cpc_s_to_o"]
        if model.config.trainable_backbone:
            groups.append("backbone")
    return [n for g in groups for n in model.group(g)]


def _stage_loss(stage):
    return {1: loss_obj, 2: loss_state_con, 3: loss_vp_con}[stage]


def _usable(stage, batch):
    if stage == 1:
        return bool((batch.objects >= 0).any())
    if stage == 2:
        return bool((batch.states >= 0).any())
    return bool(((batch.states >= 0) | (batch.objects >= 0)).any())


def _val_metric(model, dataset, manifest, stage):
    from . import evaluation

    if stage == 1:
        return evaluation.primitive_accuracy(model, dataset, "val").object_uncond
    if stage == 2:
        return evaluation.primitive_accuracy(model, dataset, "val").state
    summary = evaluation.sweep_metrics(model, dataset, "val", manifest.space_mask("closed", "val"),
                                       manifest.seen_pairs)
    return summary.best_hm or 0.0


def _fit(model, dataset, manifest, config, seed, label, timing=True):
    stage = config.stage
    scope = stage_scope(model, stage)
    loss_fn = _stage_loss(stage)
    state = OptimState(lr=config.lr, mode=config.optimizer)
    report = TrainReport(stage=label)
    if config.max_epochs == 0:
        report.stop_reason = "max_epochs"
        return report
    if dataset.indices("train").size == 0:
        raise ValueError("train split is empty")
    clock = time.perf_counter if timing else (lambda: 0.0)
    best, best_params, stale = -np.inf, None, 0
    start = clock()
    for epoch in range(config.max_epochs):
        t0 = clock()
        losses = []
        for batch in batch_iterator(dataset, "train", config.batch_size, (seed, stage), epoch):
            if not _usable(stage, batch):
                continue
            tape = Tape(model.params, trainable=scope)
            loss = loss_fn(model, batch, tape)
            tape.backward(loss)
            optimizer_step(model.params, state, scope)
            losses.append(loss.item())
        metric = _val_metric(model, dataset, manifest, stage)
        report.train_loss.append(float(np.mean(losses)) if losses else 0.0)
        report.val_metric.append(float(metric))
        report.seconds.append(clock() - t0)
        report.epochs_run = epoch + 1
        # patience counts epochs without strict improvement; among tied
        # epochs the latest weights are kept
        stale = 0 if metric > best else stale + 1
        if metric >= best:
            best, report.best_epoch = metric, epoch + 1
            best_params = {n: model.params.values[n].copy() for n in scope}
        if stale >= config.patience:
            report.stop_reason = "converged"
            break
    else:
        report.stop_reason = "max_epochs"
    if best_params is not None:
        model.params.values.update(best_params)
    report.wall_seconds = clock() - start
    return report


def run_stage(model, dataset, manifest, config, seed=0, timing=True):
    """Train one stage of the progressive schedule.

    Only the stage's parameter group is updated. The best-validation weights
    (within the stage) are restored at the end.
    """
    if config.stage != model.stages_completed + 1:
        raise StageOrderError(
            f"stage {config.stage} requested but {model.stages_completed} stage(s) completed")
    report = _fit(model, dataset, manifest, config, seed, f"stage{config.stage}", timing)
    model.stages_completed = config.stage
    return report


def run_progressive(model, dataset, manifest, configs, seed=0, timing=True):
    if [c.stage for c in configs] != [1, 2, 3]:
        raise StageOrderError("progressive training needs stage configs 1, 2, 3 in order")
    return [run_stage(model, dataset, manifest, c, seed, timing) for c in configs]


def run_joint(model, dataset, manifest, config, seed=0, timing=True):
    """Single optimisation of every group on the conditioned visual-product loss."""
    if model.stages_completed != 0:
        raise StageOrderError("joint training starts from a fresh model")
    if config.stage != 3:
        config = StageConfig(3, config.lr, config.max_epochs, config.batch_size, config.patience,
                             config.optimizer)
    report = _fit(model, dataset, manifest, config, seed, "joint", timing)
    model.stages_completed = 3
    return report


def batch_of(dataset, split):
    idx = dataset.indices(split)
    return Batch(dataset.features[idx], dataset.states[idx], dataset.objects[idx])
