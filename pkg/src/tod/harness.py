"""Experiment orchestration: configs, end-to-end runs, grids, and reports.

Every entry point reads an ExperimentConfig, builds the frozen encoder and
the generated world, trains prompt contexts per scenario, and writes CSV
artifacts plus a manifest with content hashes. All randomness is derived
from (run seed, stage name) so adding a stage never perturbs another.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, EncoderParams, build_encoder
from .world import (
    WorldSpec,
    generate_schema,
    build_balanced_text_set,
    build_biased_image_set,
    build_balanced_image_set,
)
from .tuner import (
    MODE_MTP,
    MODE_STP,
    TrainConfig,
    init_prompt_state,
    build_prompt_embeddings,
    train,
)
from .evaluate import (
    POLICY_AVERAGE,
    POLICY_WORST_GROUP,
    GroupMetrics,
    compute_group_metrics,
    normalize_curve,
    predict_set,
    regroup_metrics,
    select_checkpoint,
    zero_shot_prompt_state,
)


class HarnessConfigError(ValueError):
    """Invalid experiment configuration; message names the offending field."""


SCENARIOS = ("standard", "ablation_grid", "image_sweep", "multibias", "unknown_bias")

# Fixed stage tags: child rng streams come from (run seed, stage tag, *extra),
# so stage draws stay independent and stable when stages are added or removed.
_STAGE_TAGS = {"text": 1, "val": 2, "test": 3, "image": 4}


def stage_rng(seed: int, stage: str, *extra: int) -> np.random.Generator:
    """Child generator for one randomized stage of one seeded run."""
    if stage not in _STAGE_TAGS:
        raise HarnessConfigError(f"unknown stage {stage!r}")
    return np.random.default_rng([int(seed), _STAGE_TAGS[stage], *map(int, extra)])


@dataclass
class DataConfig:
    """Sizes and distribution of the generated train/val/test splits."""
    n_text_per_group: int = 250
    n_val: int = 2000
    n_test: int = 2000
    rho: float = 0.95
    noise_std: float = 0.02


@dataclass
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(8192, 32, 16, 7))
    world: WorldSpec = field(default_factory=lambda: WorldSpec(seed=3, entangle_rank=8))
    data: DataConfig = field(default_factory=DataConfig)
    train: dict = field(default_factory=dict)       # TrainConfig kwargs minus seed
    template_tokens: tuple[int, ...] = (11, 12, 13, 14, 15)
    seeds: tuple[int, ...] = (0, 1, 2)
    selection: str = POLICY_WORST_GROUP
    scenario: str = "standard"
    out_dir: str = "runs/out"
    # Calibration targets for the loss-curve overfitting check.
    thresholds: dict = field(default_factory=lambda: {
        "stp_overfit_min": 0.05, "mtp_overfit_max": 0.05})
    sweep: dict = field(default_factory=lambda: {
        "samples_per_group": [1, 4, 16, 53], "step_budget": 120})
    multibias: dict = field(default_factory=lambda: {
        "n_bias_attrs": 2, "n_text_per_group": 120})
    unknown_bias: dict = field(default_factory=lambda: {
        "n_aux_attrs": 3, "weight_decay": 0.05, "n_val": 4000, "n_test": 4000})

    def __post_init__(self):
        if not self.seeds:
            raise HarnessConfigError("seeds: must be non-empty")
        if self.scenario not in SCENARIOS:
            raise HarnessConfigError(f"scenario: unknown scenario {self.scenario!r}")
        if self.selection not in (POLICY_WORST_GROUP, POLICY_AVERAGE):
            raise HarnessConfigError(f"selection: unknown policy {self.selection!r}")
        self.template_tokens = tuple(int(t) for t in self.template_tokens)
        self.seeds = tuple(int(s) for s in self.seeds)

    def train_config(self, seed: int, **overrides) -> TrainConfig:
        kwargs = dict(self.train)
        kwargs.update(overrides)
        try:
            return TrainConfig(seed=seed, **kwargs)
        except TypeError as exc:
            raise HarnessConfigError(f"train: {exc}") from exc

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder"] = dataclasses.asdict(self.encoder)
        d["world"] = dataclasses.asdict(self.world)
        d["data"] = dataclasses.asdict(self.data)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        kwargs = {}
        try:
            if "encoder" in d:
                kwargs["encoder"] = EncoderConfig(**d.pop("encoder"))
            if "world" in d:
                w = d.pop("world")
                if "seq_len" in w:
                    w["seq_len"] = tuple(w["seq_len"])
                if "attr_names" in w:
                    w["attr_names"] = tuple(w["attr_names"])
                kwargs["world"] = WorldSpec(**w)
            if "data" in d:
                kwargs["data"] = DataConfig(**d.pop("data"))
        except TypeError as exc:
            raise HarnessConfigError(str(exc)) from exc
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise HarnessConfigError(f"unknown config field {key!r}")
        kwargs.update(d)
        return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def resolve_out_dir(cfg: ExperimentConfig, override=None) -> Path:
    """Output directory priority: TOD_OUT_DIR env, then override, then config."""
    env = os.environ.get("TOD_OUT_DIR")
    out = Path(env if env else override if override else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Shared run pieces
# ---------------------------------------------------------------------------

def build_world(cfg: ExperimentConfig, **world_overrides):
    params = build_encoder(cfg.encoder)
    spec = dataclasses.replace(cfg.world, **world_overrides) if world_overrides else cfg.world
    return params, generate_schema(params, spec)


def _splits(cfg, schema, params, seed, correlated_attrs=None, visible_attrs=None,
            n_val=None, n_test=None):
    val = build_biased_image_set(
        schema, params, n_val or cfg.data.n_val, cfg.data.rho,
        stage_rng(seed, "val"), cfg.data.noise_std,
        correlated_attrs=correlated_attrs, visible_attrs=visible_attrs)
    test = build_biased_image_set(
        schema, params, n_test or cfg.data.n_test, cfg.data.rho,
        stage_rng(seed, "test"), cfg.data.noise_std,
        correlated_attrs=correlated_attrs, visible_attrs=visible_attrs)
    return val, test


def _evaluate(state, params, images, logit_scale, n_groups) -> GroupMetrics:
    embs = build_prompt_embeddings(state, params)
    return compute_group_metrics(
        predict_set(images, embs, logit_scale, params, state), n_groups)


def _trained_state(texts, val, cfg, schema, params, mode, seed, policy=None,
                   attrs=None, tc=None, val_groups=None, n_val_groups=None):
    """Train one prompt context and restore the policy-selected checkpoint."""
    tc = tc or cfg.train_config(seed)
    state = init_prompt_state(cfg.template_tokens, schema, params, mode, attrs=attrs)
    snapshots, record = train(texts, val, tc, state, params,
                              val_groups=val_groups, n_val_groups=n_val_groups)
    epoch = select_checkpoint(record, policy or cfg.selection)
    state.restore(snapshots[epoch])
    return state, record, epoch


def _image_budget_config(cfg, seed, n_images, **overrides):
    """Image runs train for a fixed optimizer-step budget: tiny balanced image
    sets would otherwise receive far fewer updates per epoch count."""
    base = cfg.train_config(seed, **overrides)
    steps_per_epoch = int(np.ceil(n_images / base.batch_size))
    epochs = int(np.ceil(int(cfg.sweep["step_budget"]) / steps_per_epoch))
    return dataclasses.replace(base, total_epochs=epochs,
                               warmup_epochs=max(1, epochs // 10))


# ---------------------------------------------------------------------------
# Artifact emission
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    config: dict
    scenario: str
    artifacts: dict                  # filename -> sha256
    per_seed: dict                   # seed -> {method -> metrics dict}
    aggregate: dict                  # method -> {wg/avg/gap -> {mean, std}}
    selected_epochs: dict            # seed -> {method -> epoch}
    selection: str
    wall_clock_s: float

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / "manifest.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def verify_manifest(out_dir) -> bool:
    """Every artifact listed in the manifest exists with a matching hash."""
    out_dir = Path(out_dir)
    with open(out_dir / "manifest.json", encoding="utf-8") as fh:
        listed = json.load(fh)["artifacts"]
    return all((out_dir / name).exists() and file_sha256(out_dir / name) == digest
               for name, digest in listed.items())


def _metrics_dict(m: GroupMetrics) -> dict:
    return {"wg": m.worst_group, "avg": m.average, "gap": m.gap,
            "group_accuracies": [float(a) for a in m.accuracies]}


def _aggregate(per_seed: dict, methods) -> dict:
    out = {}
    for method in methods:
        vals = {k: [per_seed[s][method][k] for s in per_seed] for k in ("wg", "avg", "gap")}
        out[method] = {k: {"mean": float(np.mean(v)), "std": float(np.std(v))}
                       for k, v in vals.items()}
    return out


def _metrics_rows(scenario, per_seed, aggregate, epochs):
    rows = []
    for seed, by_method in per_seed.items():
        for method, m in by_method.items():
            rows.append([scenario, seed, method, epochs[seed][method],
                         m["wg"], m["avg"], m["gap"],
                         ";".join(_fmt(a) for a in m["group_accuracies"])])
    for method, stats in aggregate.items():
        rows.append([scenario, "mean", method, "",
                     stats["wg"]["mean"], stats["avg"]["mean"], stats["gap"]["mean"], ""])
        rows.append([scenario, "std", method, "",
                     stats["wg"]["std"], stats["avg"]["std"], stats["gap"]["std"], ""])
    return rows


METRICS_HEADER = ["scenario", "seed", "method", "epoch_selected",
                  "wg", "avg", "gap", "group_accuracies"]
CURVE_HEADER = ["seed", "mode", "epoch", "train_loss", "val_loss",
                "train_loss_norm", "val_loss_norm"]


def _curve_rows(seed, mode, record):
    tn = normalize_curve(record.train_loss)
    vn = normalize_curve(record.val_loss)
    return [[seed, mode, e, record.train_loss[e], record.val_loss[e], tn[e], vn[e]]
            for e in range(len(record))]


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunManifest:
    """Standard end-to-end run: zero-shot, STP, and MTP per seed.

    Emits metrics.csv (per-seed rows plus mean/std rows), loss_curve.csv for
    both trained modes, and manifest.json with artifact hashes.
    """
    started = time.monotonic()
    out = resolve_out_dir(cfg, out_dir)
    params, schema = build_world(cfg)
    per_seed, epochs, curve_rows = {}, {}, []
    for seed in cfg.seeds:
        texts = build_balanced_text_set(schema, cfg.data.n_text_per_group,
                                        stage_rng(seed, "text"))
        val, test = _splits(cfg, schema, params, seed)
        zs = zero_shot_prompt_state(schema, cfg.template_tokens, params, mode=MODE_STP)
        scale = cfg.train_config(seed).logit_scale
        row = {"zero_shot": _metrics_dict(_evaluate(zs, params, test, scale,
                                                    schema.n_groups))}
        ep = {"zero_shot": ""}
        for mode in (MODE_STP, MODE_MTP):
            state, record, epoch = _trained_state(
                texts, val, cfg, schema, params, mode, seed)
            row[mode] = _metrics_dict(_evaluate(state, params, test, scale,
                                                schema.n_groups))
            ep[mode] = epoch
            curve_rows.extend(_curve_rows(seed, mode, record))
        per_seed[seed] = row
        epochs[seed] = ep
    aggregate = _aggregate(per_seed, ["zero_shot", MODE_STP, MODE_MTP])
    write_csv(out / "metrics.csv", METRICS_HEADER,
              _metrics_rows("standard", per_seed, aggregate, epochs))
    write_csv(out / "loss_curve.csv", CURVE_HEADER, curve_rows)
    artifacts = {name: file_sha256(out / name)
                 for name in ("metrics.csv", "loss_curve.csv")}
    manifest = RunManifest(
        config=cfg.to_dict(), scenario="standard", artifacts=artifacts,
        per_seed={str(s): v for s, v in per_seed.items()}, aggregate=aggregate,
        selected_epochs={str(s): v for s, v in epochs.items()},
        selection=cfg.selection, wall_clock_s=time.monotonic() - started)
    manifest.write(out)
    return manifest


@dataclass(frozen=True)
class AblationCell:
    multi_target: bool
    text_only: bool
    metrics: GroupMetrics


def run_ablation_grid(cfg: ExperimentConfig, out_dir=None) -> list[AblationCell]:
    """Four-cell grid over (multi-target, text-only); metrics are seed means.

    Cells: neither flag = zero-shot; multi-target alone trains on a balanced
    image set; text-only alone is single-target text training; both is the
    full method.
    """
    out = resolve_out_dir(cfg, out_dir)
    params, schema = build_world(cfg)
    n_img = int(max(cfg.sweep["samples_per_group"]))
    acc = {flags: [] for flags in ((0, 0), (1, 0), (0, 1), (1, 1))}
    for seed in cfg.seeds:
        texts = build_balanced_text_set(schema, cfg.data.n_text_per_group,
                                        stage_rng(seed, "text"))
        val, test = _splits(cfg, schema, params, seed)
        scale = cfg.train_config(seed).logit_scale
        zs = zero_shot_prompt_state(schema, cfg.template_tokens, params, mode=MODE_STP)
        acc[(0, 0)].append(_evaluate(zs, params, test, scale, schema.n_groups))
        images = build_balanced_image_set(schema, params, n_img,
                                          stage_rng(seed, "image", n_img),
                                          cfg.data.noise_std)
        tc = _image_budget_config(cfg, seed, len(images))
        state, _, _ = _trained_state(images, val, cfg, schema, params, MODE_MTP,
                                     seed, tc=tc)
        acc[(1, 0)].append(_evaluate(state, params, test, scale, schema.n_groups))
        for flags, mode in (((0, 1), MODE_STP), ((1, 1), MODE_MTP)):
            state, _, _ = _trained_state(texts, val, cfg, schema, params, mode, seed)
            acc[flags].append(_evaluate(state, params, test, scale, schema.n_groups))
    cells = []
    rows = []
    for (mt, to), results in acc.items():
        mean = GroupMetrics(
            counts=results[0].counts, corrects=results[0].corrects,
            worst_group=float(np.mean([m.worst_group for m in results])),
            average=float(np.mean([m.average for m in results])))
        cells.append(AblationCell(bool(mt), bool(to), mean))
        rows.append([mt, to, mean.worst_group, mean.average, mean.gap])
    write_csv(out / "ablation.csv",
              ["multi_target", "text_only", "wg", "avg", "gap"], rows)
    return cells


def run_image_sweep(cfg: ExperimentConfig, samples_per_group=None, out_dir=None):
    """MTP trained on n balanced images per group, for each n, plus the
    text-trained reference; returns the written rows."""
    counts = [int(n) for n in (samples_per_group or cfg.sweep["samples_per_group"])]
    if not counts:
        raise HarnessConfigError("samples_per_group: must be non-empty")
    out = resolve_out_dir(cfg, out_dir)
    params, schema = build_world(cfg)
    rows = []
    wg_by_n = {n: [] for n in counts}
    text_wg = []
    for seed in cfg.seeds:
        val, test = _splits(cfg, schema, params, seed)
        scale = cfg.train_config(seed).logit_scale
        for n in counts:
            images = build_balanced_image_set(schema, params, n,
                                              stage_rng(seed, "image", n),
                                              cfg.data.noise_std)
            tc = _image_budget_config(cfg, seed, len(images))
            state, _, _ = _trained_state(images, val, cfg, schema, params,
                                         MODE_MTP, seed, tc=tc)
            wg_by_n[n].append(
                _evaluate(state, params, test, scale, schema.n_groups).worst_group)
        texts = build_balanced_text_set(schema, cfg.data.n_text_per_group,
                                        stage_rng(seed, "text"))
        state, _, _ = _trained_state(texts, val, cfg, schema, params, MODE_MTP, seed)
        text_wg.append(
            _evaluate(state, params, test, scale, schema.n_groups).worst_group)
    for n in counts:
        rows.append([n, float(np.mean(wg_by_n[n])), float(np.std(wg_by_n[n]))])
    rows.append(["text", float(np.mean(text_wg)), float(np.std(text_wg))])
    write_csv(out / "sweep.csv", ["samples_per_group", "wg_mean", "wg_std"], rows)
    return rows


def run_multibias(cfg: ExperimentConfig, bias_subset=None, out_dir=None):
    """One MTP model over target × several bias attributes; per-bias WG report."""
    out = resolve_out_dir(cfg, out_dir)
    n_biases = int(cfg.multibias["n_bias_attrs"])
    params, schema = build_world(cfg, n_bias_attrs=n_biases)
    subset = list(bias_subset) if bias_subset else list(schema.bias_names)
    if len(subset) < 2:
        raise HarnessConfigError("bias_subset: need at least 2 bias attributes")
    for name in subset:
        if name not in schema.bias_names:
            raise HarnessConfigError(f"bias_subset: unknown attribute {name!r}")
    n_text = int(cfg.multibias["n_text_per_group"])
    wg = {(method, b): [] for method in ("zero_shot", "tod") for b in subset}
    for seed in cfg.seeds:
        texts = build_balanced_text_set(schema, n_text, stage_rng(seed, "text"),
                                        attrs=subset)
        val, test = _splits(cfg, schema, params, seed, correlated_attrs=subset)
        scale = cfg.train_config(seed).logit_scale
        zs = zero_shot_prompt_state(schema, cfg.template_tokens, params, mode=MODE_STP)
        zs_records = predict_set(test, build_prompt_embeddings(zs, params),
                                 scale, params, zs)
        state, _, _ = _trained_state(texts, val, cfg, schema, params, MODE_MTP,
                                     seed, attrs=subset)
        tod_records = predict_set(test, build_prompt_embeddings(state, params),
                                  scale, params, state)
        for b in subset:
            wg[("zero_shot", b)].append(regroup_metrics(zs_records, schema, b).worst_group)
            wg[("tod", b)].append(regroup_metrics(tod_records, schema, b).worst_group)
    rows = []
    for method in ("zero_shot", "tod"):
        means = [float(np.mean(wg[(method, b)])) for b in subset]
        rows.extend([method, b, m] for b, m in zip(subset, means))
        rows.append([method, "average", float(np.mean(means))])
    write_csv(out / "multibias.csv", ["method", "bias", "wg_mean"], rows)
    return rows


def run_unknown_bias(cfg: ExperimentConfig, auxiliary_attributes=None, out_dir=None):
    """Bias-agnostic study: train once per candidate auxiliary attribute.

    The true bias attribute stays hidden: images are correlated with it, but
    training text is balanced only over (target, auxiliary), checkpoint
    selection uses average accuracy, and validation metrics see only target
    labels. Rows report WG/Avg/Gap against the hidden grouping.
    """
    out = resolve_out_dir(cfg, out_dir)
    opts = cfg.unknown_bias
    params, schema = build_world(cfg, n_aux_attrs=int(opts["n_aux_attrs"]))
    hidden = schema.bias_names[0]
    candidates = list(auxiliary_attributes) if auxiliary_attributes else list(schema.bias_names)
    for name in candidates:
        if name == "target":
            raise HarnessConfigError("auxiliary_attributes: target is not a valid auxiliary")
        if name not in schema.bias_names:
            raise HarnessConfigError(f"auxiliary_attributes: unknown attribute {name!r}")
    overrides = {}
    if "weight_decay" in opts:
        overrides["weight_decay"] = float(opts["weight_decay"])
    results = {name: {"wg": [], "avg": []} for name in ["zero_shot", *candidates]}
    for seed in cfg.seeds:
        val, test = _splits(cfg, schema, params, seed,
                            correlated_attrs=[hidden], visible_attrs=[hidden],
                            n_val=int(opts["n_val"]), n_test=int(opts["n_test"]))
        # Selection must not see the hidden grouping: validation metrics are
        # computed over target labels only.
        val_groups = np.array([s.y for s in val])
        scale = cfg.train_config(seed, **overrides).logit_scale
        zs = zero_shot_prompt_state(schema, cfg.template_tokens, params, mode=MODE_STP)
        zs_records = predict_set(test, build_prompt_embeddings(zs, params),
                                 scale, params, zs)
        m = regroup_metrics(zs_records, schema, hidden)
        results["zero_shot"]["wg"].append(m.worst_group)
        results["zero_shot"]["avg"].append(m.average)
        for ci, name in enumerate(candidates):
            texts = build_balanced_text_set(schema, cfg.data.n_text_per_group,
                                            stage_rng(seed, "text", ci), attrs=[name])
            tc = cfg.train_config(seed, **overrides)
            state, _, _ = _trained_state(
                texts, val, cfg, schema, params, MODE_MTP, seed,
                policy=POLICY_AVERAGE, attrs=[name], tc=tc,
                val_groups=val_groups, n_val_groups=schema.target.n_classes)
            records = predict_set(test, build_prompt_embeddings(state, params),
                                  scale, params, state)
            m = regroup_metrics(records, schema, hidden)
            results[name]["wg"].append(m.worst_group)
            results[name]["avg"].append(m.average)
    rows = []
    for name, res in results.items():
        wg, avg = float(np.mean(res["wg"])), float(np.mean(res["avg"]))
        rows.append([name, wg, avg, avg - wg])
    write_csv(out / "unknownbias.csv", ["auxiliary", "wg", "avg", "gap"], rows)
    with open(out / "unknownbias_manifest.json", "w", encoding="utf-8") as fh:
        json.dump({"selection": POLICY_AVERAGE, "hidden_attribute": hidden,
                   "candidates": candidates}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return rows
