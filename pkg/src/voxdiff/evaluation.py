"""Shape metrics: occupancy IoU, mutual-difference diversity, classifier
accuracy, and a pluggable text-shape scorer.

``iou``/``tmd`` operate on occupancy grids. ``tmd`` is the mean pairwise IoU
over a set of samples generated for one caption (identical samples score 1.0,
fully diverse samples score toward 0.0, so lower means more diverse).

``train_toy_classifier`` fits a small 3D-convolutional category classifier on
voxel occupancies; ``accuracy`` reports the percentage of generated shapes the
classifier assigns to their intended category. The built-in text-shape scorer
returns the classifier's probability for the category word found in a caption;
it is a plumbing stand-in, not a vision-language similarity.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from voxdiff.geometry import OccupancyGrid, TsdfGrid, to_occupancy
from voxdiff.nn import (
    Adam,
    Conv3d,
    GroupNorm,
    Linear,
    Module,
    Tensor,
    cosine_lr,
    log,
    no_grad,
    silu,
    softmax,
    tensor,
)

METRICS_FORMAT_VERSION = 1
CLASSIFIER_FORMAT_VERSION = 1


def _bits(a) -> np.ndarray:
    if isinstance(a, OccupancyGrid):
        return a.bits
    arr = np.asarray(a)
    if arr.ndim != 3:
        raise ValueError(f"occupancy must be a 3D grid, got shape {arr.shape}")
    return arr.astype(bool)


def iou(a, b) -> float:
    """Intersection over union of two occupancy grids; 1.0 when both are empty."""
    a, b = _bits(a), _bits(b)
    if a.shape != b.shape:
        raise ValueError(f"resolution mismatch: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def tmd(shapes) -> float:
    """Mean IoU over all unordered pairs of a sample set (lower = more diverse)."""
    grids = [_bits(s) for s in shapes]
    if len(grids) < 2:
        raise ValueError(f"need at least 2 shapes, got {len(grids)}")
    total, pairs = 0.0, 0
    for i in range(len(grids)):
        for j in range(i + 1, len(grids)):
            total += iou(grids[i], grids[j])
            pairs += 1
    return total / pairs


# -- toy category classifier ---------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ClassifierConfig:
    classes: tuple[str, ...]
    resolution: int = 32
    width: int = 8

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(self.classes) < 2:
            raise ValueError("need at least 2 classes")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("duplicate class names")
        if self.resolution < 8 or self.resolution % 8 != 0:
            raise ValueError("resolution must be a positive multiple of 8")
        if self.width < 1:
            raise ValueError("width must be positive")

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "resolution": self.resolution,
                "width": self.width}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        return cls(classes=tuple(d["classes"]), resolution=int(d["resolution"]),
                   width=int(d["width"]))


def _norm_groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class _ClassifierNet(Module):
    """Three stride-2 conv stages, global average pool, linear head."""

    def __init__(self, config: ClassifierConfig, rng: np.random.Generator):
        w = config.width
        widths = [w, 2 * w, 4 * w]
        self.convs = [Conv3d(1, widths[0], 3, rng, stride=2, padding=1)]
        self.norms = [GroupNorm(_norm_groups(widths[0]), widths[0])]
        for a, b in zip(widths[:-1], widths[1:]):
            self.convs.append(Conv3d(a, b, 3, rng, stride=2, padding=1))
            self.norms.append(GroupNorm(_norm_groups(b), b))
        self.head = Linear(widths[-1], len(config.classes), rng)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for conv, norm in zip(self.convs, self.norms):
            h = silu(norm(conv(h)))
        pooled = h.mean(axis=(1, 2, 3))
        return self.head(pooled)


class ToyClassifier:
    """Trained category classifier over voxel occupancy grids."""

    def __init__(self, config: ClassifierConfig, rng: np.random.Generator | None = None):
        self.config = config
        self.net = _ClassifierNet(config, rng if rng is not None
                                  else np.random.default_rng(0))
        self.holdout_accuracy: float | None = None

    def _prepare(self, grids) -> np.ndarray:
        r = self.config.resolution
        batch = []
        for g in grids:
            if isinstance(g, TsdfGrid):
                g = to_occupancy(g, min(r, g.resolution))
            bits = _bits(g)
            if bits.shape != (r, r, r):
                raise ValueError(
                    f"grid resolution {bits.shape} does not match classifier "
                    f"resolution {r}")
            batch.append(bits)
        if not batch:
            raise ValueError("no grids to classify")
        return np.stack(batch).astype(np.float32)[..., None]

    def logits(self, grids) -> np.ndarray:
        x = self._prepare(grids)
        with no_grad():
            return self.net(tensor(x)).data.copy()

    def probabilities(self, grids) -> np.ndarray:
        z = self.logits(grids)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, grids) -> list[str]:
        return [self.config.classes[i] for i in self.logits(grids).argmax(axis=1)]

    def class_index(self, label) -> int:
        if isinstance(label, (int, np.integer)):
            if not 0 <= label < len(self.config.classes):
                raise ValueError(f"class index {label} out of range")
            return int(label)
        try:
            return self.config.classes.index(label)
        except ValueError:
            raise ValueError(f"unknown class {label!r}; classifier knows "
                             f"{self.config.classes}")


def _cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    probs = softmax(logits)
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = (probs * onehot).sum(axis=1)
    return -log(picked + 1e-12).mean()


def train_toy_classifier(dataset, classes, *, width: int = 8, epochs: int = 40,
                         batch_size: int = 16, learning_rate: float = 2e-3,
                         seed: int = 0, holdout_fraction: float = 0.2,
                         log_fn=None) -> ToyClassifier:
    """Fit the toy classifier on (grid, label) pairs; labels are class names
    or indices. A deterministic held-out slice measures generalization; the
    result is stored on ``classifier.holdout_accuracy``.
    """
    classes = tuple(classes)
    pairs = list(dataset)
    if not pairs:
        raise ValueError("training dataset is empty")
    config = ClassifierConfig(classes=classes,
                              resolution=_bits(pairs[0][0]).shape[0], width=width)
    clf = ToyClassifier(config)  # placeholder for label mapping
    labels = np.array([clf.class_index(label) for _, label in pairs])
    present = {classes[i] for i in np.unique(labels)}
    missing = [c for c in classes if c not in present]
    if missing:
        raise ValueError(f"no training examples for classes {missing}")
    x = clf._prepare([g for g, _ in pairs])

    init_seed, train_seed = np.random.SeedSequence(seed).spawn(2)
    clf = ToyClassifier(config, np.random.default_rng(init_seed))
    rng = np.random.default_rng(train_seed)

    n = len(pairs)
    order = rng.permutation(n)
    n_holdout = int(round(n * holdout_fraction))
    hold_idx, train_idx = order[:n_holdout], order[n_holdout:]
    if len(train_idx) == 0:
        raise ValueError("holdout fraction leaves no training examples")

    opt = Adam(clf.net.parameters(), lr=learning_rate)
    steps_per_epoch = (len(train_idx) + batch_size - 1) // batch_size
    total_steps = epochs * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        epoch_order = train_idx[rng.permutation(len(train_idx))]
        losses = []
        for b in range(steps_per_epoch):
            idx = epoch_order[b * batch_size:(b + 1) * batch_size]
            loss = _cross_entropy(clf.net(tensor(x[idx])), labels[idx])
            if not np.isfinite(loss.data):
                raise RuntimeError(f"non-finite classifier loss at epoch {epoch + 1}")
            clf.net.zero_grad()
            loss.backward()
            opt.lr = cosine_lr(learning_rate, step, total_steps)
            opt.step()
            step += 1
            losses.append(float(loss.data))
        if log_fn is not None:
            log_fn(f"classifier epoch {epoch + 1}/{epochs}: "
                   f"loss {np.mean(losses):.4f}")

    if len(hold_idx):
        with no_grad():
            predicted = clf.net(tensor(x[hold_idx])).data.argmax(axis=1)
        clf.holdout_accuracy = float((predicted == labels[hold_idx]).mean() * 100.0)
        if log_fn is not None:
            log_fn(f"classifier held-out accuracy: {clf.holdout_accuracy:.1f}%")
    return clf


def accuracy(generated, intended_labels, classifier: ToyClassifier) -> float:
    """Percentage of generated grids classified as their intended category."""
    generated = list(generated)
    intended_labels = list(intended_labels)
    if not generated:
        raise ValueError("no generated shapes to evaluate")
    if len(generated) != len(intended_labels):
        raise ValueError(f"{len(generated)} shapes vs {len(intended_labels)} labels")
    wanted = np.array([classifier.class_index(l) for l in intended_labels])
    predicted = classifier.logits(generated).argmax(axis=1)
    return float((predicted == wanted).mean() * 100.0)


def confusion_matrix(generated, intended_labels, classifier: ToyClassifier) -> np.ndarray:
    """Counts[i, j] = shapes intended as class i that were predicted as class j."""
    generated = list(generated)
    intended = [classifier.class_index(l) for l in intended_labels]
    if len(generated) != len(intended):
        raise ValueError(f"{len(generated)} shapes vs {len(intended)} labels")
    predicted = classifier.logits(generated).argmax(axis=1)
    n = len(classifier.config.classes)
    counts = np.zeros((n, n), dtype=np.int64)
    for i, j in zip(intended, predicted):
        counts[i, j] += 1
    return counts


def save_classifier(directory, classifier: ToyClassifier) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": CLASSIFIER_FORMAT_VERSION, "kind": "classifier",
                "config": classifier.config.to_dict(),
                "holdout_accuracy": classifier.holdout_accuracy}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    np.savez(directory / "weights.npz", **classifier.net.state_dict())


def load_classifier(directory) -> ToyClassifier:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no classifier checkpoint at {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("kind") != "classifier":
        raise ValueError(f"checkpoint at {directory} is a "
                         f"{manifest.get('kind')!r} checkpoint, expected 'classifier'")
    clf = ToyClassifier(ClassifierConfig.from_dict(manifest["config"]))
    with np.load(directory / "weights.npz") as archive:
        clf.net.load_state_dict(dict(archive))
    clf.holdout_accuracy = manifest.get("holdout_accuracy")
    return clf


# -- pluggable text-shape scorer -----------------------------------------------


class CategoryProbabilityScorer:
    """Classifier probability of the category word appearing in the caption.

    A plumbing stand-in for a learned text-shape similarity: it only checks
    that the generated shape looks like the category the caption names.
    """

    name = "category-probability"

    def __init__(self, classifier: ToyClassifier):
        self.classifier = classifier

    def __call__(self, shape, caption: str) -> float:
        words = set(caption.lower().split())
        matches = [c for c in self.classifier.config.classes if c.lower() in words]
        if not matches:
            raise ValueError(
                f"caption {caption!r} names no known category "
                f"{self.classifier.config.classes}")
        probs = self.classifier.probabilities([shape])[0]
        return float(probs[self.classifier.class_index(matches[0])])


_SCORER_REGISTRY: dict[str, type] = {}


def register_scorer(name: str, factory) -> None:
    if name in _SCORER_REGISTRY:
        raise ValueError(f"scorer {name!r} already registered")
    _SCORER_REGISTRY[name] = factory


def create_scorer(name: str, **kwargs):
    if name not in _SCORER_REGISTRY:
        raise KeyError(f"no scorer named {name!r}; registered: "
                       f"{sorted(_SCORER_REGISTRY)}")
    return _SCORER_REGISTRY[name](**kwargs)


register_scorer(CategoryProbabilityScorer.name, CategoryProbabilityScorer)


def score_text_shape(scorer, shape, caption: str) -> float:
    """Apply a text-shape scorer plugin to one (shape, caption) pair."""
    if scorer is None:
        raise ValueError("no scorer plugin provided")
    return float(scorer(shape, caption))


# -- report --------------------------------------------------------------------


@dataclasses.dataclass
class MetricsReport:
    """Evaluation summary; any metric may be None when it was not computed."""

    iou_mean: float | None = None
    acc: float | None = None
    tmd: float | None = None
    scorer_value: float | None = None
    per_sample: list[dict] = dataclasses.field(default_factory=list)
    config_digest: str = ""
    format_version: int = METRICS_FORMAT_VERSION

    def __post_init__(self):
        for name in ("iou_mean", "tmd"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.acc is not None and not 0.0 <= self.acc <= 100.0:
            raise ValueError(f"acc must lie in [0, 100], got {self.acc}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        version = d.pop("format_version", None)
        if version != METRICS_FORMAT_VERSION:
            raise ValueError(f"unsupported metrics format version {version}")
        return cls(**d, format_version=version)
