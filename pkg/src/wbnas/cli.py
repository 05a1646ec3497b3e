"""Command-line entry point.

Every command resolves its inputs into a plain argument record, runs a pure
runner function, and (when ``--out`` is given) writes the outputs plus a
``manifest.yaml`` capturing the resolved arguments and tool version.
``wbnas rerun MANIFEST`` re-executes any manifest; outputs are bit-identical
because all randomness flows from explicit seeds and nothing records wall
time.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from . import __version__
from . import cost as _cost
from . import dataset as _dataset
from . import metrics as _metrics
from . import search as _search
from . import space as _space
from . import supernet as _supernet

MANIFEST_NAME = "manifest.yaml"


class CliError(click.ClickException):
    pass


def _resolve_space_arg(preset: str | None, space_file: str | None) -> dict:
    """Spaces are embedded into the manifest as either a preset name or the
    full definition, so reruns do not depend on the original file path."""
    if space_file:
        return {"space_dict": _space.space_to_dict(_space.load_space(space_file))}
    return {"preset": preset or "table-defaults"}


def _space_from_args(args: dict) -> _space.SearchSpace:
    if "space_dict" in args:
        return _space.space_from_dict(args["space_dict"])
    return _space.get_preset(args["preset"])


def _spec_to_yaml(spec: _space.SubNetworkSpec) -> str:
    return yaml.safe_dump(spec.to_dict(), sort_keys=True)


def _write_outputs(out_dir: str | None, command: str, args: dict, files: dict, stdout: str):
    click.echo(stdout, nl=False)
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"tool": "wbnas", "version": __version__, "command": command, "args": args}
    (out / MANIFEST_NAME).write_text(yaml.safe_dump(manifest, sort_keys=True))
    for name, content in files.items():
        if isinstance(content, bytes):
            (out / name).write_bytes(content)
        else:
            (out / name).write_text(content)
    (out / "stdout.txt").write_text(stdout)


# --------------------------------------------------------------------------
# Runners (pure: args dict -> (files dict, stdout text))
# --------------------------------------------------------------------------


def run_space(args: dict):
    space = _space_from_args(args)
    action = args["action"]
    if action == "sample":
        parts = []
        for i in range(args.get("n", 1)):
            seed = np.random.SeedSequence([int(args["seed"]), i])
            parts.append(_spec_to_yaml(_space.sample_random(space, seed)))
        text = "---\n".join(parts)
    elif action == "extremes":
        text = (
            "biggest:\n"
            + _spec_to_yaml(_space.sample_extreme(space, "biggest"))
            + "smallest:\n"
            + _spec_to_yaml(_space.sample_extreme(space, "smallest"))
        )
    elif action == "count":
        dims = args.get("dims")
        n = _space.enumerate_count(space, dims)
        text = f"{n}\n"
    else:
        raise _space.SpaceError(f"unknown action {action!r}")
    return {}, text


def run_cost(args: dict):
    space = _space_from_args(args)
    if "spec_dict" in args:
        spec = _space.SubNetworkSpec.from_dict(args["spec_dict"])
    elif args.get("extreme"):
        spec = _space.sample_extreme(space, args["extreme"])
    else:
        spec = _space.reference_spec(space)
    report = _cost.subnetwork_cost(space, spec)
    lines = report.to_lines()
    if args.get("fractions"):
        f = _cost.allocation_report(report)
        lines.append("allocation:")
        for mod, frac in f.items():
            lines.append(f"  {mod:<10} {100 * frac:6.2f}%")
        lines.append(f"  {'sum':<10} {100 * sum(f.values()):6.2f}%")
    return {}, "\n".join(lines) + "\n"


def run_search(args: dict):
    space = _space_from_args(args)
    evaluator = args["evaluator"]
    if evaluator == "supernet_oks":
        params = _supernet.load_checkpoint(args["checkpoint"])
        evaluator = _search.make_supernet_evaluator(
            params, space, rng_seed=int(args.get("eval_seed", 0))
        )
    config = _search.SearchConfig(
        budget=float(args["budget"]),
        n_samples=int(args.get("n_samples", 500)),
        evaluator=evaluator,
        allocation_mode=args.get("mode", "automatic"),
        fraction_tolerance=float(args.get("tolerance", 0.02)),
        exhaustive=bool(args.get("exhaustive", False)),
        jobs=int(args.get("jobs", 1)),
    )
    if config.allocation_mode == "proportional":
        result = _search.run_proportional_baseline(space, config, int(args["seed"]))
    else:
        result = _search.run_constrained_search(space, config, int(args["seed"]))
    summary = "\n".join(_search.summary_lines(result)) + "\n"
    log_lines = [
        json.dumps(
            {
                "schema": _search.TRIAL_LOG_SCHEMA,
                "n_trials": len(result.trials),
                "n_rejected": result.n_rejected,
                "n_fraction_rejected": result.n_fraction_rejected,
            },
            sort_keys=True,
        )
    ] + [json.dumps(t.to_dict(), sort_keys=True) for t in result.trials]
    files = {
        "trials.jsonl": "\n".join(log_lines) + "\n",
        "best_spec.yaml": _spec_to_yaml(result.best.spec),
        "summary.txt": summary,
    }
    return files, summary


def run_train(args: dict):
    space = _space_from_args(args)
    seed = int(args["seed"])
    steps = int(args["steps"])
    lr = float(args.get("lr", 0.05))
    n_random = int(args.get("n_random", 2))
    batches = _supernet.make_synthetic_task(seed, int(args.get("task_samples", 8)))
    if args.get("resume"):
        params = _supernet.load_checkpoint(args["resume"])
        start = int(_supernet.checkpoint_meta(args["resume"]).get("step", 0))
    else:
        params = _supernet.init_params(space, seed)
        start = 0
    loss_lines = []
    for step in range(start, start + steps):
        batch = batches[step % len(batches)]
        step_seed = np.random.SeedSequence([seed, step])
        params, results = _supernet.train_step_sandwich(
            params, space, batch, step_seed, lr, n_random=n_random
        )
        loss_lines.append(
            json.dumps(
                {
                    "step": step,
                    "subnets": [
                        {"label": label, "total": b.total, "body": b.body, "face": b.face, "hand": b.hand}
                        for label, b in results
                    ],
                },
                sort_keys=True,
            )
        )
    import io

    buf = io.BytesIO()
    _supernet.save_checkpoint(params, buf, extra={"step": start + steps, "seed": seed})
    first = json.loads(loss_lines[0])["subnets"][0]["total"]
    last = json.loads(loss_lines[-1])["subnets"][0]["total"]
    stdout = (
        f"trained {steps} steps ({len(json.loads(loss_lines[0])['subnets'])} sub-networks per step)\n"
        f"biggest-subnet loss: first {first:.6f}, last {last:.6f}\n"
    )
    files = {"checkpoint.npz": buf.getvalue(), "losses.jsonl": "\n".join(loss_lines) + "\n"}
    return files, stdout


def _paired_predictions(preds, annotations):
    by_id = {a.ann_id: a for a in annotations}
    pairs = []
    for rec in preds:
        ann = by_id.get(int(rec["annotation_id"]))
        if ann is None:
            continue
        arr = np.asarray(rec["keypoints"], dtype=np.float64).reshape(-1, 3)
        pairs.append((arr, ann, float(rec.get("score", 1.0))))
    return pairs


def run_eval(args: dict):
    annotations, images, diags = _dataset.parse(args["annotations"])
    with open(args["predictions"]) as fh:
        preds = json.load(fh)["predictions"]
    sigmas = _metrics.load_sigmas(args.get("sigmas"))
    params = _metrics.OksParams(sigmas=tuple(sigmas))
    pairs = _paired_predictions(preds, annotations)

    detections = {}
    ground_truths = {}
    for ann in annotations:
        ground_truths.setdefault(ann.image_id, []).append(
            _metrics.PoseResult(
                keypoints=ann.keypoints,
                visibility=ann.visibility,
                area=ann.bbox.w * ann.bbox.h,
            )
        )
    for arr, ann, score in pairs:
        detections.setdefault(ann.image_id, []).append(
            _metrics.PoseResult(
                keypoints=arr[:, :2], visibility=np.minimum(arr[:, 2].astype(int), 2), score=score
            )
        )
    part_results = _metrics.evaluate_parts(detections, ground_truths, params)
    lines = _metrics.report_lines(part_results)

    # matched-pair regression metrics over labeled joints
    epes, pcks, aucs, nmes = [], [], [], []
    for arr, ann, _ in pairs:
        labeled = ann.visibility > 0
        if not labeled.any():
            continue
        p = arr[labeled, :2]
        g = ann.keypoints[labeled]
        epes.append(_metrics.epe(p, g))
        pcks.append(_metrics.pck(p, g, (ann.bbox.w, ann.bbox.h)))
        aucs.append(_metrics.auc(p, g))
        # inter-ocular normalizer from the outer eye-corner face joints
        eye_l, eye_r = ann.keypoints[59], ann.keypoints[68]
        d = float(np.linalg.norm(eye_l - eye_r))
        if d > 0:
            nmes.append(_metrics.nme(p, g, d))
    if epes:
        lines.append("")
        lines.append(f"EPE  {float(np.mean(epes)):.4f} px")
        lines.append(f"PCK  {float(np.mean(pcks)):.4f}")
        lines.append(f"AUC  {float(np.mean(aucs)):.4f}")
        if nmes:
            lines.append(f"NME  {float(np.mean(nmes)):.4f}")
    if diags:
        lines.append(f"skipped {len(diags)} malformed annotation records")
    record = {
        "parts": {
            part: {"map": res["map"], "mar": res["mar"]} for part, res in part_results.items()
        },
        "epe": float(np.mean(epes)) if epes else None,
        "pck": float(np.mean(pcks)) if pcks else None,
        "auc": float(np.mean(aucs)) if aucs else None,
        "nme": float(np.mean(nmes)) if nmes else None,
    }
    files = {"metrics.json": json.dumps(record, indent=1, sort_keys=True) + "\n"}
    return files, "\n".join(lines) + "\n"


def run_dataset(args: dict):
    annotations, images, diags = _dataset.parse(args["annotations"])
    lines = [f"parsed {len(annotations)} annotations, {len(diags)} diagnostics"]
    lines += [f"  {d}" for d in diags]
    if args["action"] == "stats":
        stats = {
            "validity": _dataset.validity_counts(annotations),
            "box_size": _dataset.stats_box_size(annotations),
            "kpt_distance": _dataset.stats_kpt_distance(annotations),
            "center": _dataset.stats_center(annotations, images),
        }
        for part, s in stats["box_size"].items():
            if s["n"]:
                lines.append(f"{part}: {s['n']} boxes, mean diagonal {s['mean']:.1f} px")
        for part, s in stats["kpt_distance"].items():
            lines.append(f"{part}: mean edge length {s['mean']:.1f} px over {s['n_edges']} edges")
        files = {"stats.json": json.dumps(stats, indent=1, sort_keys=True) + "\n"}
    elif args["action"] == "extract":
        records = _dataset.extract_subsets(
            annotations, args["which"], float(args.get("ratio", 1.0))
        )
        lines.append(f"extracted {len(records)} {args['which']} instances")
        files = {
            "subsets.json": json.dumps({"instances": records}, indent=1, sort_keys=True) + "\n"
        }
    else:
        raise _dataset.DatasetError(f"unknown action {args['action']!r}")
    return files, "\n".join(lines) + "\n"


_RUNNERS = {
    "space": run_space,
    "cost": run_cost,
    "search": run_search,
    "train": run_train,
    "eval": run_eval,
    "dataset": run_dataset,
}


def _dispatch(command: str, args: dict, out: str | None):
    try:
        files, stdout = _RUNNERS[command](args)
    except (ValueError, OSError) as e:
        raise CliError(str(e)) from None
    _write_outputs(out, command, args, files, stdout)


# --------------------------------------------------------------------------
# Click wiring
# --------------------------------------------------------------------------


@click.group()
@click.version_option(__version__)
def main():
    """Whole-body keypoint network toolkit."""


def _space_options(fn):
    fn = click.option("--preset", default=None, help="built-in space preset")(fn)
    fn = click.option("--space-file", default=None, type=click.Path(exists=True))(fn)
    return fn


@main.command("space")
@click.argument("action", type=click.Choice(["sample", "extremes", "count"]))
@_space_options
@click.option("--seed", type=int, default=None)
@click.option("-n", type=int, default=1, help="number of samples")
@click.option("--dims", default=None, help="comma-separated dimension names for count")
@click.option("--out", default=None, type=click.Path())
def cmd_space(action, preset, space_file, seed, n, dims, out):
    """Sample, show extremes of, or count a search space."""
    args = _resolve_space_arg(preset, space_file)
    args["action"] = action
    if action == "sample":
        if seed is None:
            raise CliError("space sample requires --seed")
        args["seed"] = seed
        args["n"] = n
    if dims:
        args["dims"] = [d.strip() for d in dims.split(",")]
    _dispatch("space", args, out)


@main.command("cost")
@_space_options
@click.option("--spec", "spec_file", default=None, type=click.Path(exists=True))
@click.option("--extreme", type=click.Choice(["biggest", "smallest"]), default=None)
@click.option("--fractions", is_flag=True, help="append allocation percentages")
@click.option("--out", default=None, type=click.Path())
def cmd_cost(preset, space_file, spec_file, extreme, fractions, out):
    """MAC/parameter cost of a sub-network (default: the reference shape)."""
    args = _resolve_space_arg(preset, space_file)
    if spec_file:
        with open(spec_file) as fh:
            args["spec_dict"] = yaml.safe_load(fh)
    elif extreme:
        args["extreme"] = extreme
    args["fractions"] = fractions
    _dispatch("cost", args, out)


@main.command("search")
@_space_options
@click.option("--budget", type=float, required=True, help="total MAC budget")
@click.option("--seed", type=int, required=True)
@click.option("--n-samples", type=int, default=500)
@click.option("--evaluator", default="neg_total_cost")
@click.option("--checkpoint", default=None, type=click.Path(exists=True),
              help="supernet snapshot for the supernet_oks evaluator")
@click.option("--mode", type=click.Choice(["automatic", "proportional"]), default="automatic")
@click.option("--tolerance", type=float, default=0.02)
@click.option("--exhaustive", is_flag=True)
@click.option("--jobs", type=int, default=1)
@click.option("--out", default=None, type=click.Path())
def cmd_search(preset, space_file, budget, seed, n_samples, evaluator, checkpoint,
               mode, tolerance, exhaustive, jobs, out):
    """Budget-constrained sub-network search."""
    args = _resolve_space_arg(preset, space_file)
    args.update(
        budget=budget, seed=seed, n_samples=n_samples, evaluator=evaluator,
        mode=mode, tolerance=tolerance, exhaustive=exhaustive, jobs=jobs,
    )
    if checkpoint:
        args["checkpoint"] = checkpoint
    if evaluator == "supernet_oks" and not checkpoint:
        raise CliError("--evaluator supernet_oks requires --checkpoint")
    _dispatch("search", args, out)


@main.command("train")
@_space_options
@click.option("--seed", type=int, required=True)
@click.option("--steps", type=int, default=50)
@click.option("--lr", type=float, default=0.05)
@click.option("--n-random", type=int, default=2)
@click.option("--task-samples", type=int, default=8)
@click.option("--resume", default=None, type=click.Path(exists=True))
@click.option("--out", default=None, type=click.Path())
def cmd_train(preset, space_file, seed, steps, lr, n_random, task_samples, resume, out):
    """Sandwich-rule supernet training on the synthetic task."""
    args = _resolve_space_arg(preset or "toy", space_file)
    args.update(seed=seed, steps=steps, lr=lr, n_random=n_random, task_samples=task_samples)
    if resume:
        args["resume"] = resume
    _dispatch("train", args, out)


@main.command("eval")
@click.option("--predictions", required=True, type=click.Path(exists=True))
@click.option("--annotations", required=True, type=click.Path(exists=True))
@click.option("--sigmas", default=None, type=click.Path(exists=True))
@click.option("--out", default=None, type=click.Path())
def cmd_eval(predictions, annotations, sigmas, out):
    """Keypoint metrics of a predictions file against annotations."""
    args = {"predictions": predictions, "annotations": annotations}
    if sigmas:
        args["sigmas"] = sigmas
    _dispatch("eval", args, out)


@main.command("dataset")
@click.argument("action", type=click.Choice(["stats", "extract"]))
@click.option("--annotations", required=True, type=click.Path(exists=True))
@click.option("--which", type=click.Choice(["WBF", "WBH"]), default="WBF")
@click.option("--ratio", type=float, default=1.0)
@click.option("--out", default=None, type=click.Path())
def cmd_dataset(action, annotations, which, ratio, out):
    """Annotation statistics and cropped-part subset extraction."""
    args = {"action": action, "annotations": annotations}
    if action == "extract":
        args["which"] = which
        args["ratio"] = ratio
    _dispatch("dataset", args, out)


@main.command("rerun")
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--out", default=None, type=click.Path(), help="defaults to the manifest's directory")
def cmd_rerun(manifest, out):
    """Re-execute a recorded run, reproducing its outputs bit-exactly."""
    with open(manifest) as fh:
        m = yaml.safe_load(fh)
    if not isinstance(m, dict) or m.get("tool") != "wbnas":
        raise CliError(f"{manifest} is not a wbnas manifest")
    command = m["command"]
    if command not in _RUNNERS:
        raise CliError(f"manifest names unknown command {command!r}")
    if out is None:
        out = str(Path(manifest).parent)
    _dispatch(command, m["args"], out)


if __name__ == "__main__":
    sys.exit(main())
