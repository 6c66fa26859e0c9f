"""Operator command line.

Each pipeline stage runs offline against flat files; the ``tradeoff`` and
``noise-sweep`` commands drive full privacy/utility sweeps against the mock
or a remote backend and emit the report tables plus plot data.  Every
command is reproducible: identical inputs and ``--seed`` give byte-identical
outputs with the mock backend.  Failures exit nonzero with a single
machine-parsable line on stderr: ``error: <code>: <message>``.
"""

from __future__ import annotations

import functools
import sys
from pathlib import Path

import click
import numpy as np

from . import imaging, orchestrator, privacy, utility, wire
from .backends import get_backend
from .errors import InvalidArgumentError, SanigenError
from .imaging import NoiseParams
from .sanitizer import (
    PrivacyPreference,
    SanitizationLevel,
    SegmentRole,
    TaskKind,
    UserRequest,
    build_bundle,
    parse_preference,
    split_corpus,
)

IMAGE_SUFFIXES = (".png",)


def _fail(exc: Exception) -> None:
    code = exc.code if isinstance(exc, SanigenError) else "io"
    message = " ".join(str(exc).split())
    click.echo(f"error: {code}: {message}", err=True)
    sys.exit(1)


def cli_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SanigenError as exc:
            _fail(exc)
        except OSError as exc:
            _fail(exc)

    return wrapper


def _load_images(directory: str) -> list[tuple[str, np.ndarray]]:
    root = Path(directory)
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise InvalidArgumentError(f"no PNG images found in {directory!r}")
    return [(p.name, imaging.read_png(p)) for p in files]


def _load_corpus(images_dir: str, manifest_path: str, request: UserRequest):
    images = _load_images(images_dir)
    manifest = wire.load_manifest(manifest_path)
    return images, manifest


@click.group()
@click.version_option()
def main():
    """Privacy-aware sanitization, generation and evaluation pipeline."""


@main.command()
@click.option("--request", "request_path", required=True, type=click.Path(exists=True))
@click.option("--images", "images_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--preference", required=True, help="e.g. t=L2,b=L0 or t1=L0,t2=L1,b=L2")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
@cli_errors
def sanitize(request_path, images_dir, manifest_path, preference, out_path, seed):
    """Sanitize reference images into a bundle file."""
    request = wire.load_request(request_path)
    images, manifest = _load_corpus(images_dir, manifest_path, request)
    pref = parse_preference(preference, request)
    bundle = build_bundle(request, images, manifest, pref, seed=seed)
    wire.save_bundle(out_path, bundle)
    payloads = sum(1 for e in bundle.images for s in e.segments if s.payload is not None)
    click.echo(f"wrote bundle with {len(bundle.images)} images, {payloads} payloads to {out_path}")


@main.command("measure-privacy")
@click.option("--refs", "refs_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--bundle", "bundle_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", default=None, type=click.Path(exists=True),
              help="defaults to <refs>/manifest.json")
@click.option("--embeddings", "embeddings_path", default=None, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--csv", "csv_path", default=None, type=click.Path())
@cli_errors
def measure_privacy(refs_dir, bundle_path, manifest_path, embeddings_path, out_path, csv_path):
    """Compute per-role MI (and SIM, given embeddings) for a bundle."""
    bundle = wire.load_bundle(bundle_path)
    manifest_path = manifest_path or str(Path(refs_dir) / "manifest.json")
    images, manifest = _load_corpus(refs_dir, manifest_path, bundle.request)
    refs = privacy.ReferenceSet(
        split_corpus(images, manifest, bundle.request), [n for n, _ in images]
    )
    private_by_role: dict = {}
    synthetic_by_role: dict = {}
    prompt_triplet = None
    if embeddings_path:
        items, groups = wire.load_embeddings(embeddings_path)

        def group_vectors(name):
            return [items[k] for k in groups.get(name, [])]

        n = len(bundle.request.target_objects)
        for role in bundle.request.roles:
            key = role.key(n)
            private = group_vectors(f"private_{key}")
            synthetic = group_vectors(f"synthetic_{key}")
            if private and synthetic:
                private_by_role[role] = private
                synthetic_by_role[role] = synthetic
        prompts = group_vectors("prompt")
        baselines = group_vectors("empty_prompt")
        target_private = private_by_role.get(SegmentRole.target(0))
        if prompts and baselines and target_private:
            prompt_triplet = (prompts[0], target_private, baselines[0])
    report = privacy.privacy_report(
        refs, bundle, private_by_role, synthetic_by_role, prompt_triplet
    )
    n_targets = len(bundle.request.target_objects)
    wire.save_privacy_report(out_path, report, n_targets)
    if csv_path:
        Path(csv_path).write_text(wire.privacy_report_csv(report, n_targets))
    mi_text = " ".join(
        f"{r.role.key(n_targets)}={r.mi:.4f}" for r in report.roles
    )
    click.echo(f"privacy report ({report.preference}): MI {mi_text} -> {out_path}")


@main.command()
@click.option("--bundle", "bundle_path", required=True, type=click.Path(exists=True))
@click.option("--backend", "backend_spec", default="mock", show_default=True)
@click.option("--count", default=8, show_default=True,
              help="samples per class (classification) or total (detection)")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@cli_errors
def generate(bundle_path, backend_spec, count, seed, out_dir):
    """Generate a labeled synthetic dataset from a bundle."""
    bundle = wire.load_bundle(bundle_path)
    backend = get_backend(backend_spec)
    plan = orchestrator.plan_fine_tune(bundle)
    dataset = orchestrator.assemble_dataset(
        bundle.request, plan, backend, count, seed,
        canvas_size=(bundle.width, bundle.height),
    )
    wire.save_dataset(dataset, out_dir)
    click.echo(f"generated {len(dataset)} samples under {out_dir}")


@main.command()
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--test", "test_dir", default=None, type=click.Path(exists=True, file_okay=False),
              help="labeled test set; defaults to the validation split")
@click.option("--backend", "backend_spec", default="mock", show_default=True)
@click.option("--split", "train_fraction", default=utility.DEFAULT_TRAIN_FRACTION, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--predictions", "predictions_path", default=None, type=click.Path(),
              help="also write the per-image test predictions")
@cli_errors
def evaluate(dataset_dir, test_dir, backend_spec, train_fraction, seed, out_path, predictions_path):
    """Train a specialized model on a dataset and report its utility."""
    dataset = wire.load_dataset(dataset_dir)
    backend = get_backend(backend_spec)
    train_set, val_set = utility.split_dataset(dataset, train_fraction, seed)
    test_set = wire.load_dataset(test_dir) if test_dir else val_set
    report = utility.run_utility(train_set, val_set, test_set, backend)
    report.provenance["train_fraction"] = train_fraction
    wire.save_utility_report(out_path, report)
    if predictions_path:
        model_ref = report.provenance["model_ref"]
        images = [s.image for s in test_set.samples]
        if test_set.task_kind is TaskKind.CLASSIFICATION:
            predictions = backend.predict_classes(model_ref, images)
        else:
            predictions = backend.predict_detections(model_ref, images)
        wire.save_predictions(predictions_path, test_set.task_kind, predictions, model_ref)
    click.echo(f"{report.metric}={report.value:.4f} ({report.split}) -> {out_path}")


def _role_split_canvases(dataset) -> tuple[list[np.ndarray], list[np.ndarray]]:
    targets, backgrounds = [], []
    for sample in dataset.samples:
        if sample.target_mask is None:
            continue
        targets.append(imaging.apply_mask(sample.image, sample.target_mask))
        backgrounds.append(imaging.apply_mask(sample.image, ~sample.target_mask))
    return targets, backgrounds


def _private_role_canvases(refs: privacy.ReferenceSet, request: UserRequest):
    n = len(request.target_objects)
    target_role_canvases = []
    for i in range(len(refs)):
        canvases = [refs.canvas(i, SegmentRole.target(k)) for k in range(n)]
        merged = canvases[0].copy()
        for extra in canvases[1:]:
            nz = extra != 0 if extra.ndim == 2 else np.any(extra != 0, axis=2)
            merged[nz] = extra[nz]
        target_role_canvases.append(merged)
    background = [refs.canvas(i, SegmentRole.background()) for i in range(len(refs))]
    return target_role_canvases, background


def _evaluate_preference(
    request, images, manifest, pref: PrivacyPreference, backend, count, seed, train_fraction
) -> wire.TradeoffRowDoc:
    bundle = build_bundle(request, images, manifest, pref, seed=seed)
    refs = privacy.ReferenceSet(split_corpus(images, manifest, request), [n for n, _ in images])
    n = len(request.target_objects)

    mi_by_role = {
        role.key(n): privacy.normalized_mi(refs, bundle, role) for role in request.roles
    }
    mi_targets = [mi_by_role[SegmentRole.target(k).key(n)] for k in range(n)]

    plan = orchestrator.plan_fine_tune(bundle)
    dataset = orchestrator.assemble_dataset(
        request, plan, backend, count, seed, canvas_size=(bundle.width, bundle.height)
    )

    private_targets, private_backgrounds = _private_role_canvases(refs, request)
    synthetic_targets, synthetic_backgrounds = _role_split_canvases(dataset)
    sim_target = privacy.sim(
        backend.embed_images(private_targets), backend.embed_images(synthetic_targets)
    )
    sim_background = privacy.sim(
        backend.embed_images(private_backgrounds), backend.embed_images(synthetic_backgrounds)
    )

    train_set, val_set = utility.split_dataset(dataset, train_fraction, seed)
    report = utility.run_utility(train_set, val_set, val_set, backend)

    return wire.TradeoffRowDoc(
        preference=pref.spell(request),
        mi_target=float(np.mean(mi_targets)),
        mi_background=mi_by_role["b"],
        sim_target=sim_target,
        sim_background=sim_background,
        utility=report.value,
        detail={"mi_by_role": mi_by_role, "metric": report.metric,
                "epoch_scores": report.provenance["epoch_scores"]},
    )


@main.command()
@click.option("--request", "request_path", required=True, type=click.Path(exists=True))
@click.option("--images", "images_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--preferences", required=True,
              help="semicolon-separated preference spellings, e.g. 't=L0,b=L0;t=L2,b=L0'")
@click.option("--backend", "backend_spec", default="mock", show_default=True)
@click.option("--count", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--split", "train_fraction", default=utility.DEFAULT_TRAIN_FRACTION, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--plot-data", "plot_path", default=None, type=click.Path())
@cli_errors
def tradeoff(request_path, images_dir, manifest_path, preferences, backend_spec, count, seed,
             train_fraction, out_path, plot_path):
    """Privacy-utility table: one row per preference."""
    request = wire.load_request(request_path)
    images, manifest = _load_corpus(images_dir, manifest_path, request)
    backend = get_backend(backend_spec)
    rows = []
    metric = "accuracy" if request.task_kind is TaskKind.CLASSIFICATION else "mAP50"
    for spec in preferences.split(";"):
        spec = spec.strip()
        if not spec:
            continue
        pref = parse_preference(spec, request)
        rows.append(
            _evaluate_preference(
                request, images, manifest, pref, backend, count, seed, train_fraction
            )
        )
    table = wire.TradeoffTableDoc(metric=metric, rows=rows)
    wire.save_tradeoff_table(out_path, table, plot_path)
    click.echo(f"wrote {len(rows)}-row trade-off table to {out_path}")


@main.command("noise-sweep")
@click.option("--request", "request_path", required=True, type=click.Path(exists=True))
@click.option("--images", "images_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--sigma", "sigmas", default="5,10,50", show_default=True,
              help="comma-separated noise standard deviations")
@click.option("--base", "base_preference", default=None,
              help="preference the noise modifies (default: raw target, text-only background)")
@click.option("--backend", "backend_spec", default="mock", show_default=True)
@click.option("--count", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--split", "train_fraction", default=utility.DEFAULT_TRAIN_FRACTION, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--plot-data", "plot_path", default=None, type=click.Path())
@cli_errors
def noise_sweep(request_path, images_dir, manifest_path, sigmas, base_preference, backend_spec,
                count, seed, train_fraction, out_path, plot_path):
    """Obfuscation-noise sweep: one row per sigma applied to the targets."""
    request = wire.load_request(request_path)
    images, manifest = _load_corpus(images_dir, manifest_path, request)
    backend = get_backend(backend_spec)
    if base_preference is None:
        n = len(request.target_objects)
        base_preference = ",".join(
            [f"{SegmentRole.target(k).key(n)}=L2" for k in range(n)] + ["b=L0"]
        )
    base = parse_preference(base_preference, request)
    sigma_values = [float(s) for s in sigmas.split(",") if s.strip()]
    rows = []
    for sigma in sigma_values:
        levels = {}
        for role, level in base.levels.items():
            if role.is_target:
                level = SanitizationLevel(level.level, level.feature_kind, NoiseParams(sigma))
            levels[role] = level
        pref = PrivacyPreference(levels)
        row = _evaluate_preference(
            request, images, manifest, pref, backend, count, seed, train_fraction
        )
        row.detail["sigma"] = sigma
        rows.append(row)
    metric = "accuracy" if request.task_kind is TaskKind.CLASSIFICATION else "mAP50"
    table = wire.TradeoffTableDoc(metric=metric, rows=rows)
    lines = ["sigma,mi_target,mi_background,sim_target,sim_background,utility"]
    for sigma, row in zip(sigma_values, rows):
        lines.append(
            f"{sigma:g},{row.mi_target:.6f},{row.mi_background:.6f},"
            f"{row.sim_target:.6f},{row.sim_background:.6f},{row.utility:.6f}"
        )
    Path(out_path).write_text("\n".join(lines) + "\n")
    if plot_path:
        Path(plot_path).write_text(wire.canonical_json(table.model_dump(mode="json")))
    click.echo(f"wrote {len(rows)}-row noise sweep to {out_path}")


@main.command()
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@cli_errors
def serve(config_path):
    """Run the device-to-server HTTP service."""
    from .service import ServiceConfig, serve as run_server

    run_server(ServiceConfig.load(config_path))


if __name__ == "__main__":
    main()
