"""ADADELTA optimization, the training/fine-tuning loop, and the
transfer-learning experiment driver."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import ctc, models, synthgen
from . import tensor as T
from .errors import EmptySet, ShapeMismatch, TargetTooLong
from .metrics import EvalReport, evaluate
from .synthgen import RenderConfig, builtin_lexicon, resize_bilinear
from .tensor import no_grad, reset_tape


@dataclass
class AdadeltaState:
    """Per-parameter running averages E[g^2] and E[dx^2]."""

    eg2: np.ndarray
    edx2: np.ndarray


def adadelta_step(param: np.ndarray, grad: np.ndarray, state: AdadeltaState, rho: float = 0.9, eps: float = 1e-6):
    """One ADADELTA update: dx = -(RMS[dx] / RMS[g]) * g with
    RMS[v] = sqrt(E[v^2] + eps); returns the updated parameter array."""
    if param.shape != grad.shape or param.shape != state.eg2.shape:
        raise ShapeMismatch(f"adadelta: param {param.shape} vs grad {grad.shape}")
    state.eg2 = rho * state.eg2 + (1.0 - rho) * grad * grad
    dx = -np.sqrt(state.edx2 + eps) / np.sqrt(state.eg2 + eps) * grad
    state.edx2 = rho * state.edx2 + (1.0 - rho) * dx * dx
    return param + dx


class Adadelta:
    """Optimizer over a model's parameter dict, with optional global-norm
    gradient clipping (default 5.0; pass None to disable)."""

    def __init__(self, params: dict, rho: float = 0.9, eps: float = 1e-6, clip_norm: float | None = 5.0):
        self.params = params
        self.rho = rho
        self.eps = eps
        self.clip_norm = clip_norm
        self.state = {
            name: AdadeltaState(np.zeros_like(p.data, dtype=np.float64), np.zeros_like(p.data, dtype=np.float64))
            for name, p in params.items()
        }

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        scale = 1.0
        if self.clip_norm is not None and grads:
            total = float(sum(np.sum(g.astype(np.float64) ** 2) for g in grads.values()))
            norm = np.sqrt(total)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64) * scale
            updated = adadelta_step(p.data.astype(np.float64), g, self.state[name], self.rho, self.eps)
            p.data = updated.astype(p.data.dtype)


@dataclass
class TrainPlan:
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    eval_every: int = 1  # epochs between held-out evaluations
    clip_norm: float | None = 5.0
    rho: float = 0.9
    eps: float = 1e-6
    wrr_threshold: float = 80.0
    stop_at_threshold: bool = False


@dataclass
class TrainResult:
    curve: list  # (step, loss)
    eval_history: list  # (epoch, crr, wrr)
    best_wrr: float
    best_checkpoint: bytes | None
    epochs_run: int

    def epochs_to_threshold(self, wrr: float):
        for epoch, _, w in self.eval_history:
            if w >= wrr:
                return epoch
        return None

    def curve_tsv(self) -> str:
        return "".join(f"{s}\t{l:.6f}\n" for s, l in self.curve)


def _prepare(dataset, model):
    h, w = model.config.input_hw
    images, targets = [], []
    for img, label in dataset:
        images.append(resize_bilinear(np.asarray(img, dtype=np.float64), h, w).astype(model.dtype))
        targets.append(model.vocab.encode(label))
    return np.stack(images)[:, None, :, :], targets


def train(model: models.Model, dataset, plan: TrainPlan, val_set=None) -> TrainResult:
    """Seeded epoch-shuffled CTC training; tracks the best held-out WRR
    checkpoint when a validation set is given."""
    if not dataset:
        raise EmptySet("training dataset is empty")
    images, targets = _prepare(dataset, model)
    t_frames = _probe_frames(model)
    for seq in targets:
        if ctc.min_frames(seq.ids) > t_frames:
            raise TargetTooLong(f"label {seq.text!r} cannot align into {t_frames} frames")

    opt = Adadelta(model.parameters(), rho=plan.rho, eps=plan.eps, clip_norm=plan.clip_norm)
    rng = np.random.default_rng(plan.seed)
    curve = []
    history = []
    best_wrr = -1.0
    best_ckpt = None
    step = 0
    epochs_run = 0
    for epoch in range(1, plan.epochs + 1):
        model.set_training(True)
        order = rng.permutation(len(targets))
        for lo in range(0, len(order), plan.batch_size):
            # The shuffle decides batch composition only; a canonical order
            # inside the batch keeps runs reproducible across shuffle seeds.
            idx = np.sort(order[lo : lo + plan.batch_size])
            batch = images[idx]
            labels = [targets[i] for i in idx]
            log_probs = model.forward(batch)
            loss = ctc.ctc_loss(log_probs, labels)
            T.backward(loss)
            opt.step()
            model.zero_grad()
            reset_tape()
            step += 1
            curve.append((step, float(loss.data)))
        epochs_run = epoch
        if val_set is not None and epoch % plan.eval_every == 0:
            report = evaluate_model(model, val_set)
            history.append((epoch, report.crr, report.wrr))
            if report.wrr > best_wrr:
                best_wrr = report.wrr
                best_ckpt = models.checkpoint_bytes(model)
            if plan.stop_at_threshold and report.wrr >= plan.wrr_threshold:
                break
    if val_set is None:
        best_ckpt = models.checkpoint_bytes(model)
    return TrainResult(curve=curve, eval_history=history, best_wrr=best_wrr, best_checkpoint=best_ckpt, epochs_run=epochs_run)


def _probe_frames(model) -> int:
    h, w = model.config.input_hw
    with no_grad():
        out = model.forward(np.zeros((1, 1, h, w), dtype=model.dtype))
    reset_tape()
    return out.shape[0]


def predict(model: models.Model, images_batch) -> list:
    with no_grad():
        model.set_training(False)
        log_probs = model.forward(images_batch)
    return ctc.greedy_decode(log_probs, model.vocab)


def evaluate_model(model: models.Model, dataset, batch_size: int = 64) -> EvalReport:
    """Greedy-decode a labelled dataset and score CRR/WRR."""
    if not dataset:
        raise EmptySet("evaluation dataset is empty")
    h, w = model.config.input_hw
    images = np.stack(
        [resize_bilinear(np.asarray(img, dtype=np.float64), h, w).astype(model.dtype) for img, _ in dataset]
    )[:, None, :, :]
    labels = [label for _, label in dataset]
    preds = []
    for lo in range(0, len(labels), batch_size):
        preds.extend(predict(model, images[lo : lo + batch_size]))
    return evaluate(list(zip(labels, preds)))


# ---------------------------------------------------------------------------
# transfer experiment


@dataclass
class ExperimentSizes:
    src_train: int = 2000
    dst_train: int = 400
    dst_test: int = 200
    lexicon: int = 500


@dataclass
class TransferOutcome:
    condition: str
    crr: float
    wrr: float
    epochs_to_threshold: int | None


def _render_set(atlas, words, cfg, count, rng):
    picks = [words[i] for i in rng.integers(0, len(words), size=count)]
    out = []
    for i, word in enumerate(picks):
        s = synthgen.render_word(word, atlas, replace(cfg, seed=cfg.seed * 1_000_003 + i))
        out.append((s.image, s.label))
    return out


def make_split(atlas, n_train, n_test, seed, cfg=None, lexicon_size=500):
    """Disjoint-word train/test splits rendered from the builtin lexicon."""
    cfg = cfg or RenderConfig(seed=seed)
    words = builtin_lexicon(atlas, lexicon_size, seed=seed)
    rng = np.random.default_rng(seed)
    cut = max(1, int(round(0.8 * len(words))))
    train = _render_set(atlas, words[:cut], replace(cfg, seed=cfg.seed * 2 + 1), n_train, rng)
    test = _render_set(atlas, words[cut:], replace(cfg, seed=cfg.seed * 2 + 2), n_test, rng)
    return train, test


def transfer_experiment(
    src_script: str,
    dst_script: str,
    sizes: ExperimentSizes,
    plan: TrainPlan,
    model_kind: str = "crnn",
    src_checkpoint: bytes | None = None,
) -> list:
    """Train scratch-vs-transferred models on the destination script under
    identical budgets and report CRR/WRR plus epochs-to-threshold."""
    src_atlas = synthgen.get_script(src_script)
    dst_atlas = synthgen.get_script(dst_script)
    build = models.build_crnn if model_kind == "crnn" else models.build_starnet
    config = models.CrnnConfig() if model_kind == "crnn" else models.StarNetConfig()

    if src_checkpoint is None:
        src_train, src_test = make_split(src_atlas, sizes.src_train, sizes.dst_test, plan.seed, lexicon_size=sizes.lexicon)
        src_model = build(config, src_atlas.vocabulary(), seed=plan.seed)
        train(src_model, src_train, plan, val_set=src_test)
    else:
        src_model = models.model_from_checkpoint(src_checkpoint)

    dst_train, dst_test = make_split(dst_atlas, sizes.dst_train, sizes.dst_test, plan.seed + 1, lexicon_size=sizes.lexicon)

    outcomes = []
    for condition in ("scratch", "transferred"):
        model = build(config, dst_atlas.vocabulary(), seed=plan.seed + 2)
        if condition == "transferred":
            models.transfer_weights(src_model, model)
        result = train(model, dst_train, plan, val_set=dst_test)
        report = evaluate_model(model, dst_test)
        outcomes.append(
            TransferOutcome(
                condition=f"{src_script}->{dst_script}:{condition}",
                crr=report.crr,
                wrr=report.wrr,
                epochs_to_threshold=result.epochs_to_threshold(plan.wrr_threshold),
            )
        )
    return outcomes


def experiment_tsv(outcomes) -> str:
    lines = ["condition\tCRR\tWRR\tepochs_to_threshold"]
    for o in outcomes:
        e = "-" if o.epochs_to_threshold is None else str(o.epochs_to_threshold)
        lines.append(f"{o.condition}\t{o.crr:.2f}\t{o.wrr:.2f}\t{e}")
    return "\n".join(lines) + "\n"
