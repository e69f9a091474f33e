"""Class-incremental experiment orchestration: splits, arms, multi-step runs and ablations."""

import csv
import io
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .cloud import SceneSpec, generate_scene
from .evaluation import ConfusionMatrix, miou
from .exceptions import InvalidPlanError
from .network import TrainConfig
from .propel import PropelConfig, train_novel
from .protoguard import ModelConfig, prepare_cloud, train_base
from .validation import IGNORE


class Arm(str, Enum):
    FT = "FT"
    FA = "F&A"
    FT_PG = "FT+PG"
    FT_PRO = "FT+PRO"
    FT_PG_PRO = "FT+PG+PRO"
    JT = "JT"

    @property
    def prototypes(self):
        return self in (Arm.FT_PG, Arm.FT_PG_PRO)

    @property
    def pseudo_labels(self):
        return self in (Arm.FT_PRO, Arm.FT_PG_PRO)

    @property
    def novel_mode(self):
        if self is Arm.FA:
            return "fa"
        return "propel" if self.pseudo_labels else "ft"


ABLATION_ARMS = (Arm.FT, Arm.FT_PG, Arm.FT_PRO, Arm.FT_PG_PRO)


@dataclass(frozen=True)
class SplitPlan:
    """Class introduction order; ``class_order[p]`` is the original id of internal class ``p``."""

    class_order: tuple
    n_base: int
    step_sizes: tuple

    def __post_init__(self):
        c = len(self.class_order)
        if sorted(self.class_order) != list(range(c)):
            raise InvalidPlanError("class_order must be a permutation of 0..C-1")
        if self.n_base < 1:
            raise InvalidPlanError("n_base must be >= 1")
        if not self.step_sizes or any(s < 1 for s in self.step_sizes):
            raise InvalidPlanError("step sizes must all be >= 1")
        if self.n_base + sum(self.step_sizes) != c:
            raise InvalidPlanError(f"n_base + sum(step_sizes) must equal {c}")

    @property
    def n_classes(self):
        return len(self.class_order)

    @property
    def base_classes(self):
        """Original ids of the base classes."""
        return [self.class_order[p] for p in range(self.n_base)]

    def step_classes(self, step):
        """Original ids introduced at incremental ``step`` (0-based)."""
        start = self.n_base + sum(self.step_sizes[:step])
        return [self.class_order[p] for p in range(start, start + self.step_sizes[step])]

    def seen_after(self, step):
        """Number of internal classes known after incremental ``step``."""
        return self.n_base + sum(self.step_sizes[: step + 1])

    def to_internal(self, labels):
        """Map original class ids to positions in the introduction order (IGNORE kept)."""
        labels = np.asarray(labels, dtype=np.int64)
        lut = np.empty(self.n_classes, dtype=np.int64)
        lut[list(self.class_order)] = np.arange(self.n_classes)
        out = np.full(labels.shape, IGNORE, dtype=np.int64)
        ok = (labels >= 0) & (labels < self.n_classes)
        out[ok] = lut[labels[ok]]
        return out


def make_split(n_classes, order="S0", n_base=1, step_sizes=(1,), seed=0):
    """``S0`` keeps the natural order; ``S1`` is a seeded Fisher-Yates shuffle."""
    order = str(order).upper()
    if order == "S0":
        perm = list(range(n_classes))
    elif order == "S1":
        perm = list(range(n_classes))
        rng = np.random.default_rng(seed)
        for i in range(n_classes - 1, 0, -1):
            j = int(rng.integers(0, i + 1))
            perm[i], perm[j] = perm[j], perm[i]
    else:
        raise InvalidPlanError(f"unknown split order {order!r}")
    return SplitPlan(tuple(perm), int(n_base), tuple(int(s) for s in step_sizes))


@dataclass
class CilSettings:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    propel: PropelConfig = field(default_factory=PropelConfig)
    novel_train: TrainConfig = None  # novel-phase schedule; defaults to ``train``

    @property
    def seed(self):
        return self.train.seed

    @property
    def novel(self):
        return self.novel_train or self.train


@dataclass
class StepResult:
    step: int
    new_classes: list  # original ids
    seen_classes: list  # original ids, introduction order
    per_class_iou: dict  # original id -> IoU in [0, 1] or None
    base_miou: float
    novel_miou: float
    all_miou: float
    base_frozen_intact: bool = True
    pseudo_label_counts: dict = None


@dataclass
class CilReport:
    arm: str
    seed: int
    plan: SplitPlan
    steps: list
    config: dict = field(default_factory=dict)
    base_phase: StepResult = None

    @property
    def final(self):
        return self.steps[-1]

    def to_csv(self):
        """One row per (step, class) plus base/novel/all summary rows; IoU in percent."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "step", "kind", "class", "iou"])
        for st in self.steps:
            for c in st.seen_classes:
                w.writerow([self.arm, st.step, "class", c, _pct(st.per_class_iou[c])])
            for kind, value in (("base", st.base_miou), ("novel", st.novel_miou), ("all", st.all_miou)):
                w.writerow([self.arm, st.step, "summary", kind, _pct(value)])
        return buf.getvalue()

    def to_table(self):
        lines = [f"arm {self.arm} (seed {self.seed})", f"{'step':>4} {'base':>8} {'novel':>8} {'all':>8}"]
        for st in self.steps:
            lines.append(f"{st.step:>4} {_pct(st.base_miou):>8} {_pct(st.novel_miou):>8} {_pct(st.all_miou):>8}")
        return "\n".join(lines) + "\n"


def _pct(v):
    return "-" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{100.0 * v:.2f}"


def evaluate_model(model, test_clouds, plan, n_seen, k):
    """IoU over the first ``n_seen`` internal classes; later classes are excluded as IGNORE."""
    cm = ConfusionMatrix.empty(n_seen)
    for cloud in test_clouds:
        gt = plan.to_internal(cloud.labels)
        gt = np.where(gt < n_seen, gt, IGNORE)
        pred = model.predict_ctx(prepare_cloud(cloud, k))
        cm = cm.accumulate(pred, gt)
    return cm


def _step_result(cm, plan, step, n_seen, new_internal):
    n_base = plan.n_base
    per_class, all_mean = miou(cm, range(n_seen))
    base_mean = miou(cm, range(n_base))[1]
    novel_mean = miou(cm, range(n_base, n_seen))[1] if n_seen > n_base else float("nan")
    order = plan.class_order
    return StepResult(
        step=step,
        new_classes=[order[p] for p in new_internal],
        seen_classes=[order[p] for p in range(n_seen)],
        per_class_iou={order[p]: per_class[p] for p in range(n_seen)},
        base_miou=base_mean,
        novel_miou=novel_mean,
        all_miou=all_mean,
    )


def _settings_for(arm, settings):
    return replace(settings, model=replace(settings.model, use_prototypes=arm.prototypes))


def train_base_phase(train_clouds, plan, arm, settings):
    """Base model on internal classes ``0..n_base-1``; later classes act as background."""
    s = _settings_for(arm, settings)
    labels = [plan.to_internal(c.labels) for c in train_clouds]
    return train_base(train_clouds, plan.n_base, s.train, s.model, labels=labels)


def run_cil(train_clouds, test_clouds, plan, arm, settings=None, base_model=None):
    """Run one arm over every step of ``plan`` and evaluate after each step.

    ``base_model`` lets callers share an already trained base phase between
    arms (it is copied, never modified).
    """
    arm = Arm(arm)
    settings = settings or CilSettings()
    s = _settings_for(arm, settings)
    k = s.model.k
    internal = [plan.to_internal(c.labels) for c in train_clouds]

    if arm is Arm.JT:
        model = train_base(train_clouds, plan.n_classes, s.train, s.model, labels=internal)
        n = plan.n_classes
        cm = evaluate_model(model, test_clouds, plan, n, k)
        result = _step_result(cm, plan, 1, n, list(range(plan.n_base, n)))
        return CilReport(arm.value, s.seed, plan, [result], config=_echo(s))

    if base_model is None:
        base_model = train_base_phase(train_clouds, plan, arm, settings)
    current = base_model.copy().freeze()
    base_eval = _step_result(evaluate_model(current, test_clouds, plan, plan.n_base, k), plan, 0, plan.n_base, [])

    y_bg = plan.n_classes
    steps = []
    for step in range(len(plan.step_sizes)):
        n_seen = plan.seen_after(step)
        n_prev = n_seen - plan.step_sizes[step]
        new_internal = list(range(n_prev, n_seen))
        annotations = [np.where((lab >= n_prev) & (lab < n_seen), lab, y_bg) for lab in internal]
        before = current.fingerprint()
        step_train = replace(s.novel, seed=s.novel.seed + 1000 * (step + 1))
        step_propel = replace(s.propel, seed=s.propel.seed + 1000 * (step + 1))
        result = train_novel(
            current,
            train_clouds,
            annotations,
            plan.step_sizes[step],
            y_bg,
            step_train,
            step_propel,
            mode=arm.novel_mode,
            k=k,
            update_novel_prototypes=arm.prototypes,
        )
        intact = current.fingerprint() == before
        cm = evaluate_model(result.model, test_clouds, plan, n_seen, k)
        st = _step_result(cm, plan, step + 1, n_seen, new_internal)
        st.base_frozen_intact = intact
        if result.pseudo_labels:
            totals = {}
            for pls in result.pseudo_labels:
                for key, v in pls.counts().items():
                    totals[key] = totals.get(key, 0) + v
            st.pseudo_label_counts = totals
        steps.append(st)
        current = result.model.freeze()
    return CilReport(arm.value, s.seed, plan, steps, config=_echo(s), base_phase=base_eval)


def run_ablation(train_clouds, test_clouds, plan, settings=None, arms=ABLATION_ARMS):
    """Run the ablation arms with shared seeds; arms with equal prototype settings share one base model."""
    settings = settings or CilSettings()
    bases = {}
    reports = []
    for arm in arms:
        arm = Arm(arm)
        if arm.prototypes not in bases:
            bases[arm.prototypes] = train_base_phase(train_clouds, plan, arm, settings)
        reports.append(run_cil(train_clouds, test_clouds, plan, arm, settings, base_model=bases[arm.prototypes]))
    return reports


def ablation_table(reports):
    """Side-by-side final-step base/novel/all mIoU per arm (percent)."""
    lines = [f"{'arm':<10} {'FT':>3} {'PG':>3} {'PRO':>4} {'base':>8} {'novel':>8} {'all':>8}"]
    for r in reports:
        arm = Arm(r.arm)
        mark = lambda flag: "x" if flag else "-"  # noqa: E731
        f = r.final
        lines.append(
            f"{r.arm:<10} {mark(True):>3} {mark(arm.prototypes):>3} {mark(arm.pseudo_labels):>4} "
            f"{_pct(f.base_miou):>8} {_pct(f.novel_miou):>8} {_pct(f.all_miou):>8}"
        )
    return "\n".join(lines) + "\n"


def ablation_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "PG", "PRO", "base", "novel", "all"])
    for r in reports:
        arm = Arm(r.arm)
        f = r.final
        w.writerow([r.arm, int(arm.prototypes), int(arm.pseudo_labels), _pct(f.base_miou), _pct(f.novel_miou), _pct(f.all_miou)])
    return buf.getvalue()


def _echo(settings):
    from dataclasses import asdict

    return {
        "train": asdict(settings.train),
        "novel_train": asdict(settings.novel),
        "model": asdict(settings.model),
        "propel": asdict(settings.propel),
    }


# Fixed synthetic benchmark: six classes with a long tail and one overlapping base/novel pair.
BENCHMARK_HISTOGRAM = (400, 400, 400, 300, 40, 40)


def benchmark_scene_spec(seed=0):
    return SceneSpec(
        n_classes=6,
        points_per_class=BENCHMARK_HISTOGRAM,
        cluster_centers=(
            (0.0, 0.0, 0.0),
            (0.0, 3.0, 1.5),
            (2.5, 1.0, 0.8),
            (2.5, 2.5, 0.5),
            (4.5, 2.5, 0.5),
            (-2.0, 2.0, 1.8),
        ),
        cluster_stddev=(0.6, 0.6, 0.4, 0.3, 0.2, 0.15),
        overlap_shift=((3, 4, 0.6),),
        color_means=(
            (0.55, 0.50, 0.45),
            (0.80, 0.80, 0.75),
            (0.60, 0.35, 0.20),
            (0.35, 0.35, 0.60),
            (0.40, 0.40, 0.55),
            (0.90, 0.85, 0.30),
        ),
        color_stddev=0.05,
        seed=seed,
        class_names=("floor", "wall", "table", "chair", "sofa", "lamp"),
    )


def benchmark_dataset(n_train=3, n_test=1, seed=0, spec=None):
    """Train and test clouds drawn from the benchmark spec with derived seeds."""
    spec = spec or benchmark_scene_spec(seed)
    train = [generate_scene(spec.with_seed(seed * 1000 + i)) for i in range(n_train)]
    test = [generate_scene(spec.with_seed(seed * 1000 + 500 + i)) for i in range(n_test)]
    return train, test
