"""Synthetic attribute world: schema, balanced text sets, biased image sets.

A world has one target attribute, one or more labeled bias attributes and
optional unlabeled distractor attributes. Each class owns a name token and
a pool of short descriptor token sequences. Text samples are compositions
of per-attribute descriptions joined by a separator token, with group
labels assigned automatically from the source pools. Image samples are
mean token embeddings of a latent caption that never contains class name
tokens, plus Gaussian noise; texts carry name tokens at a configurable
rate. That asymmetry is what makes single-target text training overfit.

Descriptor pools for the generated default world are picked by cosine
similarity to the class name token in the frozen token table, which plays
the role of pretrained text-image alignment; target class names are
additionally chosen near their correlated bias class name, which is what
gives the zero-shot classifier its spurious correlation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderParams


class SchemaError(ValueError):
    """Raised for ill-formed attribute schemas."""


class AnnotationError(ValueError):
    """Raised when a description part cannot be traced back to a class pool."""


class WorldConfigError(ValueError):
    """Raised for invalid dataset-generation parameters."""


@dataclass(frozen=True)
class ClassSpec:
    name: str
    name_token: int
    descriptor_pool: tuple[tuple[int, ...], ...]
    name_token_rate: float = 1.0

    def __post_init__(self):
        if not self.descriptor_pool:
            raise SchemaError(f"class {self.name!r} has an empty descriptor pool")
        if not 0.0 <= self.name_token_rate <= 1.0:
            raise SchemaError(f"class {self.name!r} name_token_rate outside [0, 1]")


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    classes: tuple[ClassSpec, ...]

    @property
    def n_classes(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class AttributeSchema:
    target: AttributeSpec
    biases: tuple[AttributeSpec, ...]
    distractors: tuple[AttributeSpec, ...] = ()
    separator_token: int = 0

    @property
    def bias_names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.biases)

    def bias(self, name: str) -> AttributeSpec:
        for a in self.biases:
            if a.name == name:
                return a
        raise SchemaError(f"unknown bias attribute {name!r}")

    def bias_index(self, name: str) -> int:
        for i, a in enumerate(self.biases):
            if a.name == name:
                return i
        raise SchemaError(f"unknown bias attribute {name!r}")

    @property
    def group_shape(self) -> tuple[int, ...]:
        return (self.target.n_classes,) + tuple(a.n_classes for a in self.biases)

    @property
    def n_groups(self) -> int:
        return int(np.prod(self.group_shape))

    def group_index(self, y: int, b) -> int:
        """Row-major index of (y, b_1, ..., b_k) over the group shape."""
        idx = np.ravel_multi_index((y,) + tuple(b), self.group_shape)
        return int(idx)

    def group_label(self, g: int) -> tuple[int, tuple[int, ...]]:
        coords = np.unravel_index(g, self.group_shape)
        return int(coords[0]), tuple(int(c) for c in coords[1:])


def build_schema(target: AttributeSpec, biases, distractors=(),
                 separator_token: int = 0) -> AttributeSchema:
    """Validate and assemble an attribute schema."""
    biases = tuple(biases)
    distractors = tuple(distractors)
    if target.n_classes < 2:
        raise SchemaError("target attribute needs at least 2 classes")
    if not biases:
        raise SchemaError("at least one bias attribute is required")
    for a in biases:
        if a.n_classes < 2:
            raise SchemaError(f"bias attribute {a.name!r} needs at least 2 classes")
    labeled = (target,) + biases
    name_tokens = [c.name_token for a in labeled + distractors for c in a.classes]
    if len(set(name_tokens)) != len(name_tokens):
        raise SchemaError("class name tokens must be distinct across the schema")
    names = [c.name for a in labeled + distractors for c in a.classes]
    if len(set(names)) != len(names):
        raise SchemaError("class names must be distinct across the schema")
    for a in labeled + distractors:
        pools = [set(t for s in c.descriptor_pool for t in s) for c in a.classes]
        for i in range(len(pools)):
            for j in range(i + 1, len(pools)):
                if pools[i] & pools[j]:
                    raise SchemaError(
                        f"descriptor pools of attribute {a.name!r} overlap between classes")
    return AttributeSchema(target=target, biases=biases, distractors=distractors,
                           separator_token=separator_token)


@dataclass(frozen=True)
class TextSample:
    tokens: tuple[int, ...]
    y: int
    b: tuple[int, ...]
    g: int


@dataclass(frozen=True)
class ImageSample:
    feature: np.ndarray
    y: int
    b: tuple[int, ...]
    g: int


def sample_class_description(schema: AttributeSchema, attribute: str, class_index: int,
                             rng: np.random.Generator) -> tuple[int, ...]:
    """Draw one descriptor sequence for a class, name token prepended at p_name."""
    spec = _find_attribute(schema, attribute)
    if not 0 <= class_index < spec.n_classes:
        raise AnnotationError(f"attribute {attribute!r} has no class {class_index}")
    cls = spec.classes[class_index]
    seq = cls.descriptor_pool[rng.integers(len(cls.descriptor_pool))]
    if rng.random() < cls.name_token_rate:
        return (cls.name_token,) + seq
    return seq


def _find_attribute(schema: AttributeSchema, name: str) -> AttributeSpec:
    for a in (schema.target,) + schema.biases + schema.distractors:
        if a.name == name:
            return a
    raise AnnotationError(f"unknown attribute {name!r}")


def _annotate_part(spec: AttributeSpec, part: tuple[int, ...]) -> int:
    """Recover the class index of a description from its source pool."""
    for ci, cls in enumerate(spec.classes):
        body = part[1:] if part and part[0] == cls.name_token else part
        if tuple(body) in cls.descriptor_pool:
            return ci
    raise AnnotationError(f"part does not belong to any class pool of {spec.name!r}")


def compose_description(schema: AttributeSchema, parts, distractor_parts=()) -> TextSample:
    """Concatenate one part per labeled attribute (schema order) into a sample.

    Labels are recovered from the source pools, never passed in. Distractor
    parts are appended as given and do not affect any label.
    """
    labeled = (schema.target,) + schema.biases
    parts = [tuple(p) for p in parts]
    if len(parts) != len(labeled):
        raise AnnotationError(
            f"expected {len(labeled)} parts (target + biases), got {len(parts)}")
    y = _annotate_part(schema.target, parts[0])
    b = tuple(_annotate_part(spec, part) for spec, part in zip(schema.biases, parts[1:]))
    sep = schema.separator_token
    tokens: list[int] = []
    for part in list(parts) + [tuple(p) for p in distractor_parts]:
        if tokens:
            tokens.append(sep)
        tokens.extend(part)
    return TextSample(tokens=tuple(tokens), y=y, b=b, g=schema.group_index(y, b))


def _bias_combos(schema: AttributeSchema, attrs=None):
    """All class combinations over the selected bias attributes (schema order)."""
    if attrs is None:
        attrs = schema.bias_names
    shape = tuple(schema.bias(a).n_classes for a in attrs)
    return attrs, [tuple(int(v) for v in np.unravel_index(i, shape))
                   for i in range(int(np.prod(shape)))]


def _draw_distractor_parts(schema: AttributeSchema, rng: np.random.Generator):
    parts = []
    for spec in schema.distractors:
        ci = int(rng.integers(spec.n_classes))
        parts.append(sample_class_description(schema, spec.name, ci, rng))
    order = rng.permutation(len(parts))
    return [parts[i] for i in order]


def build_balanced_text_set(schema: AttributeSchema, n_per_group: int,
                            rng: np.random.Generator, attrs=None) -> list[TextSample]:
    """Balanced compositional text set over target x selected bias attributes.

    With attrs=None (all biases) the group histogram is exactly uniform.
    When balancing over a subset, the remaining bias attributes still get a
    description part, drawn at a uniformly random class.
    """
    if n_per_group < 1:
        raise WorldConfigError("n_per_group must be >= 1")
    attrs, combos = _bias_combos(schema, attrs)
    attr_set = set(attrs)
    samples: list[TextSample] = []
    for y in range(schema.target.n_classes):
        for combo in combos:
            chosen = dict(zip(attrs, combo))
            for _ in range(n_per_group):
                parts = [sample_class_description(schema, schema.target.name, y, rng)]
                for spec in schema.biases:
                    ci = chosen.get(spec.name)
                    if ci is None:
                        ci = int(rng.integers(spec.n_classes))
                    parts.append(sample_class_description(schema, spec.name, ci, rng))
                samples.append(compose_description(
                    schema, parts, _draw_distractor_parts(schema, rng)))
    return samples


def latent_caption(schema: AttributeSchema, y: int, b,
                   rng: np.random.Generator,
                   visible_attrs=None) -> tuple[int, ...]:
    """Descriptor-only caption for an image: no class name token, ever.

    visible_attrs restricts which bias attributes leave a visual trace;
    attributes outside it keep their labels but contribute no descriptors
    (candidate attributes that are not actually depicted).
    """
    if not 0 <= y < schema.target.n_classes:
        raise WorldConfigError(f"invalid target class {y}")
    b = tuple(b)
    if len(b) != len(schema.biases):
        raise WorldConfigError("one bias class per bias attribute is required")
    sep = schema.separator_token
    tokens: list[int] = []
    parts = []
    cls = schema.target.classes[y]
    parts.append(cls.descriptor_pool[rng.integers(len(cls.descriptor_pool))])
    for spec, ci in zip(schema.biases, b):
        if not 0 <= ci < spec.n_classes:
            raise WorldConfigError(f"invalid class {ci} for bias {spec.name!r}")
        if visible_attrs is not None and spec.name not in visible_attrs:
            continue
        cls = spec.classes[ci]
        parts.append(cls.descriptor_pool[rng.integers(len(cls.descriptor_pool))])
    for spec in schema.distractors:
        cls = spec.classes[rng.integers(spec.n_classes)]
        parts.append(cls.descriptor_pool[rng.integers(len(cls.descriptor_pool))])
    for part in parts:
        if tokens:
            tokens.append(sep)
        tokens.extend(part)
    return tuple(tokens)


def render_image(schema: AttributeSchema, params: EncoderParams, y: int, b,
                 rng: np.random.Generator, noise_std: float = 0.0,
                 visible_attrs=None) -> ImageSample:
    """Synthetic image: mean token embedding of a latent caption plus noise."""
    caption = latent_caption(schema, y, b, rng, visible_attrs)
    feature = params.lookup(caption).mean(axis=0)
    if noise_std > 0.0:
        feature = feature + rng.normal(0.0, noise_std, size=feature.shape)
    b = tuple(b)
    return ImageSample(feature=feature, y=y, b=b, g=schema.group_index(y, b))


def biased_group_counts(schema: AttributeSchema, n_total: int, rho: float,
                        correlated_attrs=None) -> dict[tuple[int, tuple[int, ...]], int]:
    """Deterministic per-group allocation for a spuriously correlated set.

    Within each target class i, a rho-fraction goes to the combo where every
    correlated bias attribute takes class i; the remainder is spread evenly
    over the other combos (earlier combos absorb the rounding leftover).
    """
    if not 0.5 <= rho <= 1.0:
        raise WorldConfigError("correlation rate must lie in [0.5, 1]")
    c_t = schema.target.n_classes
    if n_total % c_t != 0:
        raise WorldConfigError(f"n_total must be divisible by {c_t}")
    attrs, combos = _bias_combos(schema, correlated_attrs)
    n_per_class = n_total // c_t
    counts: dict[tuple[int, tuple[int, ...]], int] = {}
    for y in range(c_t):
        corr = tuple(min(y, schema.bias(a).n_classes - 1) for a in attrs)
        n_corr = int(np.floor(rho * n_per_class + 0.5))
        others = [c for c in combos if c != corr]
        rest = n_per_class - n_corr
        counts[(y, corr)] = n_corr
        for k, combo in enumerate(others):
            counts[(y, combo)] = rest // len(others) + (1 if k < rest % len(others) else 0)
    return counts


def build_biased_image_set(schema: AttributeSchema, params: EncoderParams, n_total: int,
                           rho: float, rng: np.random.Generator, noise_std: float = 0.0,
                           correlated_attrs=None, visible_attrs=None) -> list[ImageSample]:
    """Image set with spurious correlation rho between target and bias classes.

    Bias attributes outside correlated_attrs (default: all are correlated)
    are assigned classes in a balanced round-robin, i.e. uncorrelated.
    """
    counts = biased_group_counts(schema, n_total, rho, correlated_attrs)
    attrs, _ = _bias_combos(schema, correlated_attrs)
    free = [a for a in schema.bias_names if a not in attrs]
    samples: list[ImageSample] = []
    cyc = 0
    for (y, combo), n in sorted(counts.items()):
        chosen = dict(zip(attrs, combo))
        for _ in range(n):
            b = []
            for spec in schema.biases:
                if spec.name in chosen:
                    b.append(chosen[spec.name])
                else:
                    b.append(cyc % spec.n_classes)
                    cyc += 1
            samples.append(render_image(schema, params, y, tuple(b), rng,
                                        noise_std, visible_attrs))
    _ = free
    return samples


def build_balanced_image_set(schema: AttributeSchema, params: EncoderParams,
                             n_per_group: int, rng: np.random.Generator,
                             noise_std: float = 0.0,
                             visible_attrs=None) -> list[ImageSample]:
    """Exactly n_per_group images for every (target, biases) group."""
    if n_per_group < 1:
        raise WorldConfigError("n_per_group must be >= 1")
    samples: list[ImageSample] = []
    for g in range(schema.n_groups):
        y, b = schema.group_label(g)
        for _ in range(n_per_group):
            samples.append(render_image(schema, params, y, b, rng,
                                        noise_std, visible_attrs))
    return samples


# ---------------------------------------------------------------------------
# Generated default world
# ---------------------------------------------------------------------------

@dataclass
class WorldSpec:
    """Knobs for the generated world; defaults are the calibrated desk-scale setup."""
    n_bias_attrs: int = 1
    n_aux_attrs: int = 0           # extra labeled, uncorrelated attributes
    n_distractors: int = 0
    pool_size: int = 8             # descriptor sequences per class
    seq_len: tuple[int, int] = (3, 5)
    theme_size: int = 24           # candidate descriptor tokens per class
    align_window: int = 40         # similarity rank window the theme is drawn from
    entangle_rank: int = 6         # how close a target name sits to its bias name
    target_name_rate: float = 1.0
    bias_name_rate: float = 0.0
    seed: int = 0
    attr_names: tuple[str, ...] = field(default_factory=tuple)


def _theme_tokens(table: np.ndarray, anchor: int, used: set[int],
                  window: int, size: int, rng: np.random.Generator) -> list[int]:
    """Descriptor candidates: tokens most aligned with the anchor embedding."""
    sims = table @ table[anchor]
    sims /= np.linalg.norm(table, axis=1) * np.linalg.norm(table[anchor])
    order = np.argsort(-sims)
    ranked = [int(t) for t in order if int(t) not in used and int(t) != anchor]
    window = max(window, size)
    picks = rng.permutation(window)[:size]
    return [ranked[i] for i in sorted(picks)]


def _neighbor_token(table: np.ndarray, anchor: int, used: set[int], rank: int) -> int:
    sims = table @ table[anchor]
    order = np.argsort(-sims)
    ranked = [int(t) for t in order if int(t) not in used and int(t) != anchor]
    return ranked[rank]


def _build_class(name: str, name_token: int, theme: list[int], spec: WorldSpec,
                 rng: np.random.Generator, name_rate: float) -> ClassSpec:
    lo, hi = spec.seq_len
    pool = []
    for _ in range(spec.pool_size):
        length = int(rng.integers(lo, hi + 1))
        idx = rng.permutation(len(theme))[:length]
        pool.append(tuple(theme[i] for i in idx))
    return ClassSpec(name=name, name_token=name_token, descriptor_pool=tuple(pool),
                     name_token_rate=name_rate)


def generate_schema(params: EncoderParams, spec: WorldSpec) -> AttributeSchema:
    """Build the synthetic world schema from the frozen token table.

    Bias class names are random tokens; their descriptor themes are the
    tokens most aligned with the name. Target class i's name is chosen as a
    near neighbor (entangle_rank) of bias class i's name, so target themes
    inherit a spurious bias-aligned component.
    """
    table = params.token_table
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5EED]))
    used: set[int] = set()

    def take_random_token() -> int:
        while True:
            t = int(rng.integers(params.vocab_size))
            if t not in used:
                used.add(t)
                return t

    separator = take_random_token()

    def labeled_attr(label: str, prefix: str) -> AttributeSpec:
        classes = []
        for ci in range(2):
            name_token = take_random_token()
            theme = _theme_tokens(table, name_token, used, spec.align_window,
                                  spec.theme_size, rng)
            used.update(theme)
            classes.append(_build_class(f"{prefix}_c{ci}", name_token, theme, spec,
                                        rng, spec.bias_name_rate))
        return AttributeSpec(name=label, classes=tuple(classes))

    # Auxiliary attributes are generated last so that adding them leaves the
    # target/bias part of the world unchanged.
    bias_attrs: list[AttributeSpec] = []
    for ai in range(spec.n_bias_attrs):
        bias_attrs.append(labeled_attr(f"bias{ai}", f"attr{ai}"))
    bias_name_tokens = [[c.name_token for c in a.classes] for a in bias_attrs]

    target_classes = []
    for ci in range(2):
        anchor = bias_name_tokens[0][ci]
        name_token = _neighbor_token(table, anchor, used, spec.entangle_rank)
        used.add(name_token)
        theme = _theme_tokens(table, name_token, used, spec.align_window,
                              spec.theme_size, rng)
        used.update(theme)
        target_classes.append(_build_class(f"target_c{ci}", name_token, theme, spec,
                                           rng, spec.target_name_rate))
    target = AttributeSpec(name="target", classes=tuple(target_classes))

    distractors = []
    for di in range(spec.n_distractors):
        classes = []
        for ci in range(2):
            name_token = take_random_token()
            theme = _theme_tokens(table, name_token, used, spec.align_window,
                                  spec.theme_size, rng)
            used.update(theme)
            classes.append(_build_class(f"dis{di}_c{ci}", name_token, theme, spec,
                                        rng, 0.0))
        distractors.append(AttributeSpec(name=f"distractor{di}", classes=tuple(classes)))

    for ai in range(spec.n_aux_attrs):
        bias_attrs.append(labeled_attr(f"aux{ai}", f"attr{spec.n_bias_attrs + ai}"))

    return build_schema(target, bias_attrs, distractors, separator_token=separator)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def schema_to_dict(schema: AttributeSchema) -> dict:
    def attr(a: AttributeSpec) -> dict:
        return {"name": a.name, "classes": [
            {"name": c.name, "name_token": c.name_token,
             "name_token_rate": c.name_token_rate,
             "descriptor_pool": [list(s) for s in c.descriptor_pool]}
            for c in a.classes]}
    return {"target": attr(schema.target),
            "biases": [attr(a) for a in schema.biases],
            "distractors": [attr(a) for a in schema.distractors],
            "separator_token": schema.separator_token}


def schema_from_dict(d: dict) -> AttributeSchema:
    def attr(a: dict) -> AttributeSpec:
        return AttributeSpec(name=a["name"], classes=tuple(
            ClassSpec(name=c["name"], name_token=c["name_token"],
                      descriptor_pool=tuple(tuple(s) for s in c["descriptor_pool"]),
                      name_token_rate=c["name_token_rate"])
            for c in a["classes"]))
    return build_schema(attr(d["target"]), [attr(a) for a in d["biases"]],
                        [attr(a) for a in d.get("distractors", [])],
                        separator_token=d["separator_token"])


def dump_text_set(samples: list[TextSample], path) -> None:
    with open(path, "w") as f:
        for s in samples:
            f.write(json.dumps({"tokens": list(s.tokens), "y": s.y,
                                "b": list(s.b), "g": s.g}) + "\n")


def dump_image_set(samples: list[ImageSample], path) -> None:
    with open(path, "w") as f:
        for s in samples:
            f.write(json.dumps({"feature": [float(v) for v in s.feature], "y": s.y,
                                "b": list(s.b), "g": s.g}) + "\n")


def load_text_set(path) -> list[TextSample]:
    out = []
    with open(path) as f:
        for line in f:
            d = json.loads(line)
            out.append(TextSample(tokens=tuple(d["tokens"]), y=d["y"],
                                  b=tuple(d["b"]), g=d["g"]))
    return out


def load_image_set(path) -> list[ImageSample]:
    out = []
    with open(path) as f:
        for line in f:
            d = json.loads(line)
            out.append(ImageSample(feature=np.asarray(d["feature"], dtype=np.float64),
                                   y=d["y"], b=tuple(d["b"]), g=d["g"]))
    return out
