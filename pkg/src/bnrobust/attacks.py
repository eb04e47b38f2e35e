"""L-infinity attacks (FGSM, PGD with restarts, square-patch random search) and robust-error evaluation."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import functional as F
from .data import DatasetSplit, LabeledBatch
from .tensor import Tensor, no_grad

ATTACK_KINDS = ("fgsm", "pgd", "random_search")


class AttackModeError(RuntimeError):
    """The model was left in train mode; BN statistics would drift during the attack."""


def parse_epsilon(value) -> float:
    """Parse a budget given as a rational string (``"8/255"``) or a number."""
    if isinstance(value, str):
        return float(Fraction(value.strip()))
    return float(value)


@dataclass
class AttackSpec:
    epsilon: float = 8 / 255
    steps: int = 10
    step_size: float | None = None  # defaults to epsilon / 4
    restarts: int = 1
    random_init: bool = True
    seed: int = 0
    kind: str = "pgd"
    targeted: bool = False  # PGD towards the clean runner-up class
    queries: int = 5000  # random_search only
    p_init: float = 0.05  # random_search: initial patch area fraction
    norm: str = "linf"

    def __post_init__(self):
        self.epsilon = parse_epsilon(self.epsilon)
        if self.norm != "linf":
            raise ValueError(f"only the linf norm is supported, got {self.norm!r}")
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.steps < 0 or self.restarts < 1:
            raise ValueError("steps must be >= 0 and restarts >= 1")
        if self.step_size is not None and self.step_size <= 0 and self.steps > 0:
            raise ValueError("step_size must be > 0 when steps > 0")

    @property
    def alpha(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size

    def label(self) -> str:
        eps = Fraction(self.epsilon).limit_denominator(1000)
        if self.kind == "random_search":
            return f"rs{self.queries}@{eps}"
        if self.kind == "fgsm":
            return f"fgsm@{eps}"
        tag = "-tgt" if self.targeted else ""
        return f"pgd{self.steps}x{self.restarts}{tag}@{eps}"


@dataclass
class AttackResult:
    adversarial: np.ndarray
    success_mask: np.ndarray
    final_loss: np.ndarray
    loss_trace: list = field(default_factory=list)


def _check_eval(model) -> None:
    if model.training:
        raise AttackModeError("attacks require an eval-mode model (call model.eval())")


@contextlib.contextmanager
def input_gradients_only(model):
    """Temporarily stop parameters from collecting gradients."""
    params = [p for _, p in model.named_parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag


def predict(model, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Eval-style logits without recording a tape."""
    outs = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            outs.append(model(Tensor(images[s : s + batch_size])).data)
    return np.concatenate(outs) if outs else np.zeros((0, 0), dtype=np.float32)


def input_gradient(model, x: np.ndarray, labels: np.ndarray, targets: np.ndarray | None = None):
    """Gradient of the attack objective w.r.t. the input, plus the logits.

    Untargeted: summed cross-entropy of the true labels. Targeted: negative
    summed cross-entropy of ``targets``.
    """
    xt = Tensor(x, requires_grad=True)
    with input_gradients_only(model):
        logits = model(xt)
        if targets is None:
            loss = F.cross_entropy(logits, labels, reduction="sum")
        else:
            loss = F.cross_entropy(logits, targets, reduction="sum") * -1.0
        loss.backward()
    return xt.grad, logits.data


def _project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    lo = np.maximum(x - eps, 0.0)
    hi = np.minimum(x + eps, 1.0)
    return np.clip(x_adv, lo, hi).astype(x.dtype)


def runner_up(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    masked = logits.astype(np.float64).copy()
    masked[np.arange(len(labels)), labels] = -np.inf
    return masked.argmax(axis=1)


def fgsm(model, batch: LabeledBatch, spec: AttackSpec) -> AttackResult:
    """Single signed-gradient step of size epsilon."""
    _check_eval(model)
    x, y = batch.images, batch.labels
    if spec.epsilon == 0:
        adv = x.copy()
    else:
        grad, _ = input_gradient(model, x, y)
        adv = _project(x + spec.epsilon * np.sign(grad), x, spec.epsilon)
    logits = predict(model, adv)
    return AttackResult(adv, logits.argmax(axis=1) != y, F.per_example_cross_entropy(logits, y))


def pgd(model, batch: LabeledBatch, spec: AttackSpec, rng: np.random.Generator | None = None) -> AttackResult:
    """Projected signed-gradient ascent on cross-entropy inside the epsilon ball.

    Across restarts, each example keeps the perturbation that misclassifies
    it, and among equals the one with the larger loss.
    """
    _check_eval(model)
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    x, y = batch.images, batch.labels
    eps, alpha = spec.epsilon, spec.alpha
    targets = None
    if spec.targeted:
        targets = runner_up(predict(model, x), y)

    best_adv = x.copy()
    best_loss = np.full(len(y), -np.inf)
    best_success = np.zeros(len(y), dtype=bool)
    for _ in range(spec.restarts):
        if spec.random_init and eps > 0:
            adv = _project(x + rng.uniform(-eps, eps, size=x.shape).astype(x.dtype), x, eps)
        else:
            adv = x.copy()
        for _ in range(spec.steps):
            grad, _ = input_gradient(model, adv, y, targets)
            adv = _project(adv + alpha * np.sign(grad).astype(x.dtype), x, eps)
        logits = predict(model, adv)
        loss = F.per_example_cross_entropy(logits, y)
        success = logits.argmax(axis=1) != y
        better = (success & ~best_success) | ((success == best_success) & (loss > best_loss))
        best_adv[better] = adv[better]
        best_loss[better] = loss[better]
        best_success[better] = success[better]
    return AttackResult(best_adv, best_success, best_loss)


def margin_loss(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Best wrong logit minus true logit; positive means misclassified."""
    z = logits.astype(np.float64)
    rows = np.arange(len(labels))
    true = z[rows, labels].copy()
    z[rows, labels] = -np.inf
    return z.max(axis=1) - true


def patch_fraction(p_init: float, query: int, total: int) -> float:
    """Square-attack style schedule: the patch area halves at fixed fractions of the query budget."""
    frac = query / max(total, 1)
    p = p_init
    for cut in (0.001, 0.005, 0.02, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8):
        if frac > cut:
            p /= 2
    return p


def random_search_attack(model, batch: LabeledBatch, spec: AttackSpec, queries: int | None = None) -> AttackResult:
    """Gradient-free search over square patches of +/-epsilon signs.

    Starts from the clean input; a proposal replaces one random square patch
    (per example, signs drawn per channel) and is kept only when the margin
    loss strictly increases. Examples already misclassified stop querying.
    ``loss_trace`` records the per-example margin after every query.
    """
    _check_eval(model)
    queries = spec.queries if queries is None else queries
    if queries < 1:
        raise ValueError("queries must be >= 1")
    rng = np.random.default_rng([spec.seed, 7])
    x, y = batch.images, batch.labels
    n, c, h, w = x.shape
    eps = spec.epsilon
    adv = x.copy()
    best = margin_loss(predict(model, adv), y)
    trace = [best.copy()]
    for q in range(queries):
        frac = patch_fraction(spec.p_init, q, queries)
        side = int(round(np.sqrt(frac * h * w)))
        side = min(max(side, 1) if frac > 0 else 0, h, w)
        active = np.flatnonzero(best <= 0)
        if side == 0 or eps == 0 or len(active) == 0:
            trace.append(best.copy())
            continue
        proposal = adv[active].copy()
        ys = rng.integers(0, h - side + 1, size=len(active))
        xs = rng.integers(0, w - side + 1, size=len(active))
        signs = rng.choice(np.array([-1.0, 1.0], dtype=x.dtype), size=(len(active), c))
        for k, i in enumerate(active):
            patch = x[i, :, ys[k] : ys[k] + side, xs[k] : xs[k] + side] + eps * signs[k][:, None, None]
            proposal[k, :, ys[k] : ys[k] + side, xs[k] : xs[k] + side] = patch
        proposal = _project(proposal, x[active], eps)
        cand = margin_loss(predict(model, proposal), y[active])
        accept = cand > best[active]
        adv[active[accept]] = proposal[accept]
        best[active[accept]] = cand[accept]
        trace.append(best.copy())
    logits = predict(model, adv)
    return AttackResult(adv, logits.argmax(axis=1) != y, F.per_example_cross_entropy(logits, y), trace)


def run_attack(model, batch: LabeledBatch, spec: AttackSpec, rng: np.random.Generator | None = None) -> AttackResult:
    if spec.kind == "fgsm":
        return fgsm(model, batch, spec)
    if spec.kind == "random_search":
        return random_search_attack(model, batch, spec)
    return pgd(model, batch, spec, rng)


def default_ensemble(epsilon=8 / 255, seed: int = 0) -> list[AttackSpec]:
    """Evaluation proxy for AutoAttack: untargeted and runner-up-targeted PGD-50 with 5 restarts plus random search."""
    eps = parse_epsilon(epsilon)
    return [
        AttackSpec(epsilon=eps, steps=50, restarts=5, seed=seed),
        AttackSpec(epsilon=eps, steps=50, restarts=5, seed=seed + 1, targeted=True),
        AttackSpec(epsilon=eps, kind="random_search", queries=5000, seed=seed + 2),
    ]


def evaluate_robust_error(
    model,
    split: DatasetSplit,
    ensemble: list[AttackSpec],
    n_examples: int | None = None,
    batch_size: int = 256,
    clean_only: bool = False,
) -> dict:
    """Clean and worst-case robust error (percent) on the first ``n_examples``.

    An example counts as robust-incorrect if the clean input or any ensemble
    member misclassifies it. ``per_attack`` holds each member's error
    (combined with the clean pass). An empty ensemble is an error unless
    ``clean_only`` is set.
    """
    if not ensemble and not clean_only:
        raise ValueError("empty attack ensemble (pass clean_only=True for a clean-only evaluation)")
    n_examples = len(split) if n_examples is None else n_examples
    subset = split.subset(n_examples)
    was_training = model.training
    model.eval()
    try:
        clean_wrong = np.zeros(n_examples, dtype=bool)
        member_wrong = np.zeros((len(ensemble), n_examples), dtype=bool)
        for b, start in enumerate(range(0, n_examples, batch_size)):
            idx = np.arange(start, min(start + batch_size, n_examples))
            batch = subset.batch(idx)
            clean_wrong[idx] = predict(model, batch.images).argmax(axis=1) != batch.labels
            for k, spec in enumerate(ensemble):
                rng = np.random.default_rng([spec.seed, k, b])
                spec_b = replace(spec, seed=spec.seed * 1_000_003 + b)
                res = run_attack(model, batch, spec_b, rng)
                member_wrong[k, idx] = res.success_mask
    finally:
        model.train(was_training)
    robust_wrong = clean_wrong | member_wrong.any(axis=0)
    pct = lambda m: float(100.0 * m.mean()) if len(m) else 0.0  # noqa: E731
    return {
        "n": n_examples,
        "clean_error": pct(clean_wrong),
        "robust_error": pct(robust_wrong),
        "per_attack": {
            f"{k}:{spec.label()}": pct(clean_wrong | member_wrong[k]) for k, spec in enumerate(ensemble)
        },
        "robust_wrong": robust_wrong,
    }
