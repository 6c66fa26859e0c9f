"""Wire formats and file schemas.

Everything that crosses a process boundary lives here: the sanitized-bundle
envelope (the device-to-server body), segmentation manifest files,
embedding files, privacy/utility reports, the on-disk dataset layout, and
the request/response bodies of the backend protocol.  Serialization is
canonical JSON (sorted keys, compact separators) so parse/serialize
round-trips are byte-identical; image payloads travel as base64 PNG.
"""

from __future__ import annotations

import base64
import io
import json
import zipfile
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import imaging
from .dataset import BBox, Provenance, SyntheticDataset, SyntheticSample
from .errors import SchemaError
from .imaging import NoiseParams
from .privacy import EmbeddingVector, PrivacyReport, PromptLeakage, RolePrivacy
from .sanitizer import (
    BundleImage,
    FeatureKind,
    Level,
    ManifestImage,
    PrivacyPreference,
    SanitizationLevel,
    SanitizedBundle,
    SanitizedSegment,
    SegmentationManifest,
    SegmentRole,
    TaskKind,
    UserRequest,
)
from .utility import UtilityReport

BUNDLE_VERSION = 1


def b64encode_bytes(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64decode_str(text: str) -> bytes:
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except Exception as exc:
        raise SchemaError(f"invalid base64 payload: {exc}") from exc


def canonical_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"


def _validation_to_schema_error(exc: ValidationError) -> SchemaError:
    first = exc.errors()[0]
    path = ".".join(str(p) for p in first["loc"])
    return SchemaError(f"{path}: {first['msg']}", field=path)


class _Doc(BaseModel):
    model_config = ConfigDict(extra="forbid")


# --- user request and preference --------------------------------------------


class RequestDoc(_Doc):
    target_objects: list[str] = Field(min_length=1)
    background: str
    training_objective: str = ""
    label_classes: list[str] = Field(default_factory=list)
    task_kind: Literal["classification", "detection"]


class NoiseDoc(_Doc):
    sigma: float = Field(ge=0)
    seed: int = 0


class SchemeDoc(_Doc):
    level: Literal["L0", "L1", "L2"]
    feature_kind: Optional[Literal["canny", "pose", "layout_box"]] = None
    noise: Optional[NoiseDoc] = None


def request_to_doc(request: UserRequest) -> RequestDoc:
    return RequestDoc(
        target_objects=list(request.target_objects),
        background=request.background,
        training_objective=request.training_objective,
        label_classes=list(request.label_classes),
        task_kind=request.task_kind.value,
    )


def request_from_doc(doc: RequestDoc) -> UserRequest:
    return UserRequest(
        tuple(doc.target_objects),
        doc.background,
        doc.training_objective,
        tuple(doc.label_classes),
        TaskKind(doc.task_kind),
    )


def load_request(path: str | Path) -> UserRequest:
    try:
        doc = RequestDoc.model_validate_json(Path(path).read_text())
    except ValidationError as exc:
        raise _validation_to_schema_error(exc) from exc
    return request_from_doc(doc)


def scheme_to_doc(level: SanitizationLevel) -> SchemeDoc:
    return SchemeDoc(
        level=level.level.value,
        feature_kind=level.feature_kind.value if level.feature_kind else None,
        noise=NoiseDoc(sigma=level.noise.sigma, seed=level.noise.seed) if level.noise else None,
    )


def scheme_from_doc(doc: SchemeDoc) -> SanitizationLevel:
    return SanitizationLevel(
        Level(doc.level),
        FeatureKind(doc.feature_kind) if doc.feature_kind else None,
        NoiseParams(doc.noise.sigma, doc.noise.seed) if doc.noise else None,
    )


def preference_to_doc(preference: PrivacyPreference, request: UserRequest) -> dict[str, SchemeDoc]:
    n = len(request.target_objects)
    return {role.key(n): scheme_to_doc(level) for role, level in preference.levels.items()}


def preference_from_doc(doc: dict[str, SchemeDoc]) -> PrivacyPreference:
    return PrivacyPreference(
        {SegmentRole.parse(key): scheme_from_doc(scheme) for key, scheme in doc.items()}
    )


# --- sanitized bundle envelope ----------------------------------------------


class CanvasDoc(_Doc):
    width: int = Field(ge=1)
    height: int = Field(ge=1)


class SegmentDoc(_Doc):
    role: str
    text: str
    scheme: SchemeDoc
    payload: Optional[str] = None


class BundleImageDoc(_Doc):
    name: str
    segments: list[SegmentDoc]


class BundleDoc(_Doc):
    version: int = BUNDLE_VERSION
    seed: int = 0
    canvas: CanvasDoc
    request: RequestDoc
    preference: dict[str, SchemeDoc]
    images: list[BundleImageDoc]


def bundle_to_doc(bundle: SanitizedBundle) -> BundleDoc:
    n = len(bundle.request.target_objects)
    images = []
    for entry in bundle.images:
        segments = []
        for seg in entry.segments:
            payload = None
            if seg.payload is not None:
                payload = b64encode_bytes(imaging.encode_png(seg.payload))
            segments.append(
                SegmentDoc(
                    role=seg.role.key(n),
                    text=seg.text,
                    scheme=scheme_to_doc(seg.scheme),
                    payload=payload,
                )
            )
        images.append(BundleImageDoc(name=entry.name, segments=segments))
    return BundleDoc(
        version=BUNDLE_VERSION,
        seed=bundle.seed,
        canvas=CanvasDoc(width=bundle.width, height=bundle.height),
        request=request_to_doc(bundle.request),
        preference=preference_to_doc(bundle.preference, bundle.request),
        images=images,
    )


def bundle_from_doc(doc: BundleDoc) -> SanitizedBundle:
    try:
        request = request_from_doc(doc.request)
        preference = preference_from_doc(doc.preference)
        preference.validate_for(request)
    except SchemaError:
        raise
    except Exception as exc:
        raise SchemaError(f"request/preference: {exc}", field="preference") from exc
    images = []
    for i, entry in enumerate(doc.images):
        segments = []
        for j, seg in enumerate(entry.segments):
            path = f"images.{i}.segments.{j}"
            try:
                role = SegmentRole.parse(seg.role)
                scheme = scheme_from_doc(seg.scheme)
                payload = None
                if seg.payload is not None:
                    payload = imaging.decode_png(b64decode_str(seg.payload))
                    if payload.shape[:2] != (doc.canvas.height, doc.canvas.width):
                        raise SchemaError(
                            f"payload is {payload.shape[1]}x{payload.shape[0]}, canvas is "
                            f"{doc.canvas.width}x{doc.canvas.height}"
                        )
                segments.append(SanitizedSegment(role, seg.text, scheme, payload))
            except SchemaError as exc:
                raise SchemaError(f"{path}: {exc}", field=path) from exc
            except Exception as exc:
                raise SchemaError(f"{path}: {exc}", field=path) from exc
        images.append(BundleImage(entry.name, segments))
    bundle = SanitizedBundle(
        request, preference, doc.canvas.width, doc.canvas.height, images, doc.seed
    )
    _validate_bundle_shape(bundle)
    return bundle


def _validate_bundle_shape(bundle: SanitizedBundle) -> None:
    required = set(bundle.request.roles)
    for i, entry in enumerate(bundle.images):
        seen = [seg.role for seg in entry.segments]
        if len(seen) != len(set(seen)) or set(seen) != required:
            raise SchemaError(
                f"images.{i}: expected exactly one segment per role", field=f"images.{i}"
            )
        for j, seg in enumerate(entry.segments):
            expected = bundle.preference.for_role(seg.role)
            if seg.scheme != expected:
                raise SchemaError(
                    f"images.{i}.segments.{j}: scheme differs from preference",
                    field=f"images.{i}.segments.{j}.scheme",
                )
            if seg.text != bundle.request.text_for(seg.role):
                raise SchemaError(
                    f"images.{i}.segments.{j}: text does not match the request",
                    field=f"images.{i}.segments.{j}.text",
                )


def dump_bundle(bundle: SanitizedBundle) -> str:
    return canonical_json(bundle_to_doc(bundle).model_dump(mode="json"))


def parse_bundle(body: str | bytes) -> SanitizedBundle:
    try:
        doc = BundleDoc.model_validate_json(body)
    except ValidationError as exc:
        raise _validation_to_schema_error(exc) from exc
    return bundle_from_doc(doc)


def save_bundle(path: str | Path, bundle: SanitizedBundle) -> None:
    Path(path).write_text(dump_bundle(bundle))


def load_bundle(path: str | Path) -> SanitizedBundle:
    return parse_bundle(Path(path).read_bytes())


# --- segmentation manifest ---------------------------------------------------


class ManifestTargetDoc(_Doc):
    index: int = Field(ge=0)
    mask: str
    confidence: float = Field(ge=0.0, le=1.0, default=1.0)


class ManifestImageDoc(_Doc):
    file: str
    targets: list[ManifestTargetDoc]


class ManifestDoc(_Doc):
    images: list[ManifestImageDoc]


def load_manifest(path: str | Path) -> SegmentationManifest:
    """Read a manifest file; mask paths resolve relative to the manifest."""
    path = Path(path)
    try:
        doc = ManifestDoc.model_validate_json(path.read_text())
    except ValidationError as exc:
        raise _validation_to_schema_error(exc) from exc
    images = []
    for entry in doc.images:
        masks = {}
        confidences = {}
        for target in entry.targets:
            masks[target.index] = imaging.read_mask_png(path.parent / target.mask)
            confidences[target.index] = target.confidence
        images.append(ManifestImage(entry.file, masks, confidences))
    return SegmentationManifest(images)


def save_manifest(path: str | Path, manifest: SegmentationManifest, mask_dir: str = "masks") -> None:
    path = Path(path)
    (path.parent / mask_dir).mkdir(parents=True, exist_ok=True)
    images = []
    for entry in manifest.images:
        targets = []
        for index, mask in sorted(entry.target_masks.items()):
            mask_path = f"{mask_dir}/{Path(entry.name).stem}_t{index}.png"
            imaging.write_mask_png(path.parent / mask_path, mask)
            targets.append(
                ManifestTargetDoc(
                    index=index, mask=mask_path, confidence=entry.confidences.get(index, 1.0)
                )
            )
        images.append(ManifestImageDoc(file=entry.name, targets=targets))
    path.write_text(canonical_json(ManifestDoc(images=images).model_dump(mode="json")))


# --- embedding files ----------------------------------------------------------


class EmbeddingItemDoc(_Doc):
    provider_id: str
    dimension: int = Field(ge=1)
    values: list[float]


class EmbeddingFileDoc(_Doc):
    items: dict[str, EmbeddingItemDoc]
    groups: dict[str, list[str]] = Field(default_factory=dict)


def save_embeddings(
    path: str | Path,
    items: dict[str, EmbeddingVector],
    groups: dict[str, list[str]] | None = None,
) -> None:
    doc = EmbeddingFileDoc(
        items={
            name: EmbeddingItemDoc(
                provider_id=vec.provider_id,
                dimension=vec.dimension,
                values=[float(v) for v in vec.values],
            )
            for name, vec in items.items()
        },
        groups=groups or {},
    )
    Path(path).write_text(canonical_json(doc.model_dump(mode="json")))


def load_embeddings(path: str | Path) -> tuple[dict[str, EmbeddingVector], dict[str, list[str]]]:
    try:
        doc = EmbeddingFileDoc.model_validate_json(Path(path).read_text())
    except ValidationError as exc:
        raise _validation_to_schema_error(exc) from exc
    items = {}
    for name, item in doc.items.items():
        if len(item.values) != item.dimension:
            raise SchemaError(
                f"items.{name}: dimension {item.dimension} does not match "
                f"{len(item.values)} values",
                field=f"items.{name}",
            )
        items[name] = EmbeddingVector(np.asarray(item.values, dtype=np.float64), item.provider_id)
    return items, doc.groups


# --- reports -------------------------------------------------------------------


class RolePrivacyDoc(_Doc):
    role: str
    mi: float
    sim: Optional[float] = None


class PromptLeakageDoc(_Doc):
    value: float
    baseline: float


class PrivacyReportDoc(_Doc):
    preference: str
    roles: list[RolePrivacyDoc]
    prompt: Optional[PromptLeakageDoc] = None


def privacy_report_to_doc(report: PrivacyReport, n_targets: int) -> PrivacyReportDoc:
    return PrivacyReportDoc(
        preference=report.preference,
        roles=[
            RolePrivacyDoc(role=r.role.key(n_targets), mi=r.mi, sim=r.sim) for r in report.roles
        ],
        prompt=(
            PromptLeakageDoc(value=report.prompt.value, baseline=report.prompt.baseline)
            if report.prompt
            else None
        ),
    )


def privacy_report_from_doc(doc: PrivacyReportDoc) -> PrivacyReport:
    return PrivacyReport(
        doc.preference,
        [RolePrivacy(SegmentRole.parse(r.role), r.mi, r.sim) for r in doc.roles],
        PromptLeakage(doc.prompt.value, doc.prompt.baseline) if doc.prompt else None,
    )


def save_privacy_report(path: str | Path, report: PrivacyReport, n_targets: int) -> None:
    doc = privacy_report_to_doc(report, n_targets)
    Path(path).write_text(canonical_json(doc.model_dump(mode="json")))


def csv_quote(text: str) -> str:
    """Quote a CSV field that may contain commas (preference spellings do)."""
    return '"' + text.replace('"', '""') + '"'


def privacy_report_csv(report: PrivacyReport, n_targets: int) -> str:
    lines = ["preference,role,mi,sim,prompt_sim,prompt_baseline"]
    for row in report.roles:
        sim_text = "" if row.sim is None else f"{row.sim:.6f}"
        prompt_value = f"{report.prompt.value:.6f}" if report.prompt else ""
        prompt_base = f"{report.prompt.baseline:.6f}" if report.prompt else ""
        lines.append(
            f"{csv_quote(report.preference)},{row.role.key(n_targets)},{row.mi:.6f},{sim_text},"
            f"{prompt_value},{prompt_base}"
        )
    return "\n".join(lines) + "\n"


class ClassPredictionDoc(_Doc):
    class_id: str
    confidence: float = Field(ge=0.0, le=1.0)


class DetectionDoc(_Doc):
    x: float
    y: float
    w: float = Field(gt=0)
    h: float = Field(gt=0)
    class_id: int
    confidence: float = Field(ge=0.0, le=1.0)


class PredictionsDoc(_Doc):
    task_kind: Literal["classification", "detection"]
    model_ref: str = ""
    classes: Optional[list[ClassPredictionDoc]] = None
    detections: Optional[list[list[DetectionDoc]]] = None


def save_predictions(
    path: str | Path,
    task_kind: TaskKind,
    predictions,
    model_ref: str = "",
) -> None:
    """Write per-image predictions: class+confidence records or detection
    lists, depending on the task."""
    if task_kind is TaskKind.CLASSIFICATION:
        doc = PredictionsDoc(
            task_kind=task_kind.value,
            model_ref=model_ref,
            classes=[
                ClassPredictionDoc(class_id=c, confidence=conf) for c, conf in predictions
            ],
        )
    else:
        doc = PredictionsDoc(
            task_kind=task_kind.value,
            model_ref=model_ref,
            detections=[
                [
                    DetectionDoc(
                        x=d.bbox.x, y=d.bbox.y, w=d.bbox.w, h=d.bbox.h,
                        class_id=d.class_id, confidence=d.confidence,
                    )
                    for d in per_image
                ]
                for per_image in predictions
            ],
        )
    Path(path).write_text(canonical_json(doc.model_dump(mode="json")))


def load_predictions(path: str | Path):
    from .dataset import Detection

    try:
        doc = PredictionsDoc.model_validate_json(Path(path).read_text())
    except ValidationError as exc:
        raise _validation_to_schema_error(exc) from exc
    if doc.task_kind == "classification":
        if doc.classes is None:
            raise SchemaError("classification predictions missing 'classes'")
        return TaskKind.CLASSIFICATION, [(p.class_id, p.confidence) for p in doc.classes]
    if doc.detections is None:
        raise SchemaError("detection predictions missing 'detections'")
    return TaskKind.DETECTION, [
        [Detection(BBox(d.x, d.y, d.w, d.h), d.class_id, d.confidence) for d in per_image]
        for per_image in doc.detections
    ]


class UtilityReportDoc(_Doc):
    metric: Literal["accuracy", "mAP50"]
    value: float = Field(ge=0.0, le=1.0)
    split: str
    provenance: dict = Field(default_factory=dict)


def utility_report_to_doc(report: UtilityReport) -> UtilityReportDoc:
    return UtilityReportDoc(
        metric=report.metric, value=report.value, split=report.split, provenance=report.provenance
    )


def save_utility_report(path: str | Path, report: UtilityReport) -> None:
    Path(path).write_text(canonical_json(utility_report_to_doc(report).model_dump(mode="json")))


class TradeoffRowDoc(_Doc):
    preference: str
    mi_target: float
    mi_background: float
    sim_target: float
    sim_background: float
    utility: float
    detail: dict = Field(default_factory=dict)


class TradeoffTableDoc(_Doc):
    metric: str
    rows: list[TradeoffRowDoc]


def tradeoff_csv(table: TradeoffTableDoc) -> str:
    lines = ["preference,mi_target,mi_background,sim_target,sim_background,utility"]
    for row in table.rows:
        lines.append(
            f"{csv_quote(row.preference)},{row.mi_target:.6f},{row.mi_background:.6f},"
            f"{row.sim_target:.6f},{row.sim_background:.6f},{row.utility:.6f}"
        )
    return "\n".join(lines) + "\n"


def save_tradeoff_table(path: str | Path, table: TradeoffTableDoc, plot_path: str | Path | None = None) -> None:
    Path(path).write_text(tradeoff_csv(table))
    if plot_path is not None:
        Path(plot_path).write_text(canonical_json(table.model_dump(mode="json")))


# --- dataset on disk -----------------------------------------------------------


class SampleDoc(_Doc):
    file: str
    label: Optional[str] = None
    label_file: Optional[str] = None
    mask_file: Optional[str] = None
    split: Optional[Literal["train", "val"]] = None
    provenance: dict = Field(default_factory=dict)


class DatasetManifestDoc(_Doc):
    request: RequestDoc
    seed: int = 0
    samples: list[SampleDoc]


def _detection_lines(sample: SyntheticSample) -> str:
    h, w = sample.image.shape[:2]
    lines = []
    for cid, box in sample.label:
        cx = (box.x + box.w / 2) / w
        cy = (box.y + box.h / 2) / h
        lines.append(f"{cid} {cx:.6f} {cy:.6f} {box.w / w:.6f} {box.h / h:.6f}")
    return "\n".join(lines) + ("\n" if lines else "")


def _parse_detection_lines(text: str, width: int, height: int):
    label = []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        cid = int(parts[0])
        cx, cy, w, h = (float(p) for p in parts[1:5])
        label.append(
            (cid, BBox((cx - w / 2) * width, (cy - h / 2) * height, w * width, h * height))
        )
    return label


def _sample_records(ds: SyntheticDataset, splits: dict[int, str] | None, store_masks: bool):
    records = []
    for i, sample in enumerate(ds.samples):
        name = f"{i:05d}"
        rec = {
            "index": i,
            "sample": sample,
            "image_path": f"images/{name}.png",
            "label_path": f"labels/{name}.txt" if ds.task_kind is TaskKind.DETECTION else None,
            "mask_path": (
                f"masks/{name}.png" if store_masks and sample.target_mask is not None else None
            ),
            "split": (splits or {}).get(i),
        }
        records.append(rec)
    return records


def _dataset_manifest(ds: SyntheticDataset, records) -> DatasetManifestDoc:
    samples = []
    for rec in records:
        sample = rec["sample"]
        samples.append(
            SampleDoc(
                file=rec["image_path"],
                label=sample.label if ds.task_kind is TaskKind.CLASSIFICATION else None,
                label_file=rec["label_path"],
                mask_file=rec["mask_path"],
                split=rec["split"],
                provenance={
                    "prompt": sample.provenance.prompt,
                    "preference": sample.provenance.preference,
                    "strategy": sample.provenance.strategy,
                    "seed": sample.provenance.seed,
                    "source": sample.provenance.source,
                },
            )
        )
    return DatasetManifestDoc(request=request_to_doc(ds.request), seed=ds.seed, samples=samples)


def save_dataset(ds: SyntheticDataset, directory: str | Path, *, store_masks: bool = True) -> None:
    directory = Path(directory)
    records = _sample_records(ds, None, store_masks)
    for sub in ("images", "labels", "masks"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    for rec in records:
        sample = rec["sample"]
        imaging.write_png(directory / rec["image_path"], sample.image)
        if rec["label_path"]:
            (directory / rec["label_path"]).write_text(_detection_lines(sample))
        if rec["mask_path"]:
            imaging.write_mask_png(directory / rec["mask_path"], sample.target_mask)
    manifest = _dataset_manifest(ds, records)
    (directory / "manifest.json").write_text(canonical_json(manifest.model_dump(mode="json")))


def _dataset_from_reader(manifest: DatasetManifestDoc, read_bytes, read_text):
    request = request_from_doc(manifest.request)
    samples = []
    split_of = []
    for i, doc in enumerate(manifest.samples):
        image = imaging.decode_png(read_bytes(doc.file))
        if request.task_kind is TaskKind.CLASSIFICATION:
            if doc.label is None:
                raise SchemaError(f"samples.{i}: classification sample without label")
            label = doc.label
        else:
            if doc.label_file is None:
                raise SchemaError(f"samples.{i}: detection sample without label file")
            label = _parse_detection_lines(read_text(doc.label_file), image.shape[1], image.shape[0])
        mask = None
        if doc.mask_file:
            mask = imaging.decode_png(read_bytes(doc.mask_file)) != 0
            if mask.ndim == 3:
                mask = mask.any(axis=2)
        prov = doc.provenance
        samples.append(
            SyntheticSample(
                image=image,
                label=label,
                provenance=Provenance(
                    prompt=prov.get("prompt", ""),
                    preference=prov.get("preference", ""),
                    strategy=prov.get("strategy", ""),
                    seed=int(prov.get("seed", 0)),
                    source=prov.get("source", ""),
                ),
                target_mask=mask,
            )
        )
        split_of.append(doc.split)
    return SyntheticDataset(request, samples, manifest.seed), split_of


def load_dataset(directory: str | Path) -> SyntheticDataset:
    directory = Path(directory)
    try:
        manifest = DatasetManifestDoc.model_validate_json((directory / "manifest.json").read_text())
    except ValidationError as exc:
        raise _validation_to_schema_error(exc) from exc
    ds, _ = _dataset_from_reader(
        manifest,
        lambda rel: (directory / rel).read_bytes(),
        lambda rel: (directory / rel).read_text(),
    )
    return ds


_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def dataset_to_zip_bytes(
    ds: SyntheticDataset, *, splits: dict[int, str] | None = None, store_masks: bool = False
) -> bytes:
    """Deterministic zip of the dataset layout; ``splits`` marks train/val."""
    records = _sample_records(ds, splits, store_masks)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for rec in records:
            sample = rec["sample"]
            _zip_write(zf, rec["image_path"], imaging.encode_png(sample.image))
            if rec["label_path"]:
                _zip_write(zf, rec["label_path"], _detection_lines(sample).encode())
            if rec["mask_path"]:
                _zip_write(zf, rec["mask_path"], imaging.encode_png(sample.target_mask))
        manifest = _dataset_manifest(ds, records)
        _zip_write(zf, "manifest.json", canonical_json(manifest.model_dump(mode="json")).encode())
    return buf.getvalue()


def dataset_from_zip_bytes(data: bytes) -> tuple[SyntheticDataset, list[str | None]]:
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
    except zipfile.BadZipFile as exc:
        raise SchemaError(f"invalid dataset zip: {exc}") from exc
    with zf:
        try:
            manifest = DatasetManifestDoc.model_validate_json(zf.read("manifest.json"))
        except KeyError as exc:
            raise SchemaError("dataset zip is missing manifest.json") from exc
        except ValidationError as exc:
            raise _validation_to_schema_error(exc) from exc
        return _dataset_from_reader(
            manifest, lambda rel: zf.read(rel), lambda rel: zf.read(rel).decode()
        )


def dataset_splits_to_zip_bytes(train: SyntheticDataset, val: SyntheticDataset) -> bytes:
    merged = SyntheticDataset(
        train.request, list(train.samples) + list(val.samples), train.seed
    )
    splits = {i: ("train" if i < len(train) else "val") for i in range(len(merged))}
    return dataset_to_zip_bytes(merged, splits=splits)


def dataset_splits_from_zip_bytes(data: bytes) -> tuple[SyntheticDataset, SyntheticDataset]:
    merged, split_of = dataset_from_zip_bytes(data)
    train_samples = [s for s, sp in zip(merged.samples, split_of) if sp != "val"]
    val_samples = [s for s, sp in zip(merged.samples, split_of) if sp == "val"]
    train = SyntheticDataset(merged.request, train_samples, merged.seed)
    val = SyntheticDataset(merged.request, val_samples, merged.seed)
    return train, val


# --- backend protocol bodies ----------------------------------------------------


class BackendErrorDoc(_Doc):
    code: str
    message: str
    retryable: bool = False


class FineTuneBody(_Doc):
    request_id: str = ""
    role: str
    references: list[str] = Field(min_length=1)
    config: dict = Field(default_factory=dict)


class GenerateBody(_Doc):
    request_id: str = ""
    model_ref: str
    prompt: str
    seed: int
    want_alpha: bool = False


class ConditionGenerateBody(_Doc):
    request_id: str = ""
    features: list[str] = Field(min_length=1)
    prompt: str
    seed: int
    count: int = Field(ge=1)


class InpaintBody(_Doc):
    request_id: str = ""
    model_ref: str
    canvas: str
    mask: str
    prompt: str
    seed: int


class EmbedBody(_Doc):
    request_id: str = ""
    images: Optional[list[str]] = None
    texts: Optional[list[str]] = None


class SegmentBody(_Doc):
    request_id: str = ""
    image: str
    targets: list[str] = Field(min_length=1)


class TrainBody(_Doc):
    request_id: str = ""
    dataset: str
    config: dict = Field(default_factory=dict)


class PredictBody(_Doc):
    request_id: str = ""
    model_ref: str
    task: Literal["classification", "detection"]
    images: list[str]


# --- job and artifact documents ---------------------------------------------------


class ArtifactRefDoc(_Doc):
    kind: Literal["dataset", "privacy_report", "utility_report", "model_weights", "tradeoff_table"]
    address: str
    media_type: str


class JobDoc(_Doc):
    id: str
    state: Literal[
        "queued",
        "sanitizing-received",
        "fine_tuning",
        "generating",
        "training",
        "evaluating",
        "done",
        "failed",
    ]
    created: str
    updated: str
    error: Optional[str] = None
    artifacts: list[ArtifactRefDoc] = Field(default_factory=list)
