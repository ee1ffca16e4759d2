"""Command-line front end for the experiment harness.

Subcommands: generate, run, ablate, sweep, multibias, unknownbias, check.
Exit status is 0 on success, 2 on usage/config errors, 1 on any other
failure (with a one-line diagnostic on stderr).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import harness
from .encoder import EncoderConfig, build_encoder
from .evaluate import GroupMetrics, PredictionRecord, compute_group_metrics
from .tuner import (
    MODE_MTP,
    TrainConfig,
    finite_difference_gradient,
    init_prompt_state,
    loss_gradients,
    sample_embedding_matrix,
)
from .world import (
    build_balanced_text_set,
    build_biased_image_set,
    dump_image_set,
    dump_text_set,
    generate_schema,
    schema_to_dict,
)


def _load_config(path: str) -> harness.ExperimentConfig:
    p = Path(path)
    if not p.exists() and p.name == path:
        # Bare filename: fall back to the packaged defaults.
        packaged = resources.files("tod").joinpath(path)
        if packaged.is_file():
            return harness.ExperimentConfig.from_dict(
                json.loads(packaged.read_text(encoding="utf-8")))
    return harness.load_config(p)


def _apply_overrides(cfg: harness.ExperimentConfig, args) -> harness.ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,))
    if getattr(args, "scenario", None):
        cfg = dataclasses.replace(cfg, scenario=args.scenario)
    return cfg


def cmd_generate(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    out = harness.resolve_out_dir(cfg, args.out)
    params, schema = harness.build_world(cfg)
    with open(out / "schema.json", "w", encoding="utf-8") as fh:
        json.dump(schema_to_dict(schema), fh, indent=2, sort_keys=True)
        fh.write("\n")
    for seed in cfg.seeds:
        texts = build_balanced_text_set(schema, cfg.data.n_text_per_group,
                                        harness.stage_rng(seed, "text"))
        dump_text_set(texts, out / f"text_train_seed{seed}.jsonl")
        for split in ("val", "test"):
            images = build_biased_image_set(
                schema, params, getattr(cfg.data, f"n_{split}"), cfg.data.rho,
                harness.stage_rng(seed, split), cfg.data.noise_std)
            dump_image_set(images, out / f"image_{split}_seed{seed}.jsonl")
    print(f"wrote datasets for seeds {list(cfg.seeds)} to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    manifest = harness.run_experiment(cfg, out_dir=args.out)
    agg = manifest.aggregate[MODE_MTP]
    print(f"standard run: WG {agg['wg']['mean']:.3f} "
          f"Avg {agg['avg']['mean']:.3f} ({len(cfg.seeds)} seeds)")
    return 0


def cmd_ablate(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    cells = harness.run_ablation_grid(cfg, out_dir=args.out)
    for cell in cells:
        print(f"multi_target={int(cell.multi_target)} "
              f"text_only={int(cell.text_only)} WG={cell.metrics.worst_group:.3f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    rows = harness.run_image_sweep(cfg, out_dir=args.out)
    for n, wg, _ in rows:
        print(f"samples_per_group={n}: WG={wg:.3f}")
    return 0


def cmd_multibias(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    rows = harness.run_multibias(cfg, out_dir=args.out)
    for method, bias, wg in rows:
        print(f"{method} {bias}: WG={wg:.3f}")
    return 0


def cmd_unknownbias(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    rows = harness.run_unknown_bias(cfg, out_dir=args.out)
    for name, wg, avg, gap in rows:
        print(f"{name}: WG={wg:.3f} Avg={avg:.3f} Gap={gap:.3f}")
    return 0


# ---------------------------------------------------------------------------
# Built-in oracles for `check`
# ---------------------------------------------------------------------------

def gradient_oracle(n_configs: int = 10, tol: float = 1e-5) -> tuple[bool, float]:
    """Analytic context gradients vs central finite differences."""
    worst = 0.0
    rng = np.random.default_rng(2024)
    for trial in range(n_configs):
        params = build_encoder(EncoderConfig(512, 12, 8, int(rng.integers(1 << 16))))
        schema = generate_schema(
            params, harness.WorldSpec(seed=int(rng.integers(1 << 16)),
                                      align_window=20, theme_size=10, pool_size=4))
        cfg = TrainConfig(seed=trial, margin=0.2, logit_scale=4.0,
                          n_context=int(rng.integers(2, 6)))
        state = init_prompt_state(list(rng.integers(16, size=cfg.n_context)),
                                  schema, params, MODE_MTP)
        batch = build_balanced_text_set(schema, 2, rng)
        x, pos = sample_embedding_matrix(batch, state, params)
        analytic, _ = loss_gradients(x, pos, state, params, cfg)
        numeric = finite_difference_gradient(x, pos, state, params, cfg)
        denom = max(np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst < tol, worst


def _metric_fixture() -> tuple[list[PredictionRecord], GroupMetrics]:
    """Hand-enumerated 20-record fixture: group sizes 5/5/6/4 with
    5/4/6/2 correct, so accuracies 1.0/0.8/1.0/0.5, WG 0.5, Avg 17/20."""
    correct_by_group = {0: (5, 5), 1: (5, 4), 2: (6, 6), 3: (4, 2)}
    records = []
    for g, (count, right) in correct_by_group.items():
        y, b = divmod(g, 2)
        for i in range(count):
            ok = i < right
            records.append(PredictionRecord(
                pred_y=y if ok else 1 - y, pred_b=(b,), true_y=y, true_b=(b,), g=g))
    expected = GroupMetrics(counts=np.array([5, 5, 6, 4]),
                            corrects=np.array([5, 4, 6, 2]),
                            worst_group=0.5, average=0.85)
    return records, expected


def metric_oracle() -> tuple[bool, str]:
    records, expected = _metric_fixture()
    got = compute_group_metrics(records, 4)
    ok = (got.worst_group == expected.worst_group
          and got.average == expected.average
          and abs(got.gap - 0.35) < 1e-15)
    return ok, f"WG={got.worst_group} Avg={got.average} Gap={got.gap}"


def cmd_check(args) -> int:
    del args
    failures = 0
    ok, worst = gradient_oracle()
    print(f"{'PASS' if ok else 'FAIL'} gradient oracle "
          f"(worst relative error {worst:.3e})")
    failures += not ok
    ok, detail = metric_oracle()
    print(f"{'PASS' if ok else 'FAIL'} metric oracle ({detail})")
    failures += not ok
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tod", description="Balanced text prompt-tuning experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="default.json",
                        help="experiment config JSON (default: packaged default.json)")
    common.add_argument("--out", default=None, help="output directory override")
    common.add_argument("--seed", type=int, default=None,
                        help="run a single seed instead of the configured list")
    common.add_argument("--scenario", choices=harness.SCENARIOS, default=None)
    sub.add_parser("generate", parents=[common],
                   help="emit datasets for the configured world").set_defaults(fn=cmd_generate)
    sub.add_parser("run", parents=[common],
                   help="standard end-to-end run").set_defaults(fn=cmd_run)
    sub.add_parser("ablate", parents=[common],
                   help="four-cell ablation grid").set_defaults(fn=cmd_ablate)
    sub.add_parser("sweep", parents=[common],
                   help="image samples-per-group sweep").set_defaults(fn=cmd_sweep)
    sub.add_parser("multibias", parents=[common],
                   help="multi-bias per-attribute report").set_defaults(fn=cmd_multibias)
    sub.add_parser("unknownbias", parents=[common],
                   help="bias-agnostic auxiliary study").set_defaults(fn=cmd_unknownbias)
    sub.add_parser("check", help="run built-in oracles").set_defaults(fn=cmd_check)
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (harness.HarnessConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic per contract
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    raise SystemExit(cli_main())


if __name__ == "__main__":
    main()
