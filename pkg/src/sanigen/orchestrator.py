"""Server-side generation orchestration.

From a sanitized bundle: derive the per-role fine-tuning plan (driven only
by payload presence and kind), build the prompt set, sample target
placements, drive a pluggable generation backend, and assemble the labeled
synthetic dataset.  Per-sample seeds are derived from (dataset seed, sample
index) so results never depend on scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import imaging
from .backends import Backend, DIFFUSION_FINE_TUNE_DEFAULTS
from .dataset import BBox, Provenance, SyntheticDataset, SyntheticSample
from .errors import (
    GenerationFailedError,
    IncompatibleDatasetsError,
    InconsistentBundleError,
    InvalidArgumentError,
    PlacementInfeasibleError,
)
from .sanitizer import SanitizedBundle, SegmentRole, TaskKind, UserRequest

#: How the target is scaled relative to the canvas height when placed.
DEFAULT_SCALE_RANGE = (0.2, 0.6)

#: Conditioned references produced per shared feature image before
#: fine-tuning (the feature-payload path).
DEFAULT_CONDITIONED_REFERENCES = 8

PROMPT_TEMPLATE = "a {target} is {label}"

PRETRAINED_REF = "pretrained"


class Strategy(str, Enum):
    PRETRAINED_ONLY = "pretrained_only"
    FEATURE_CONDITIONED_THEN_FINETUNE = "feature_conditioned_then_finetune"
    FINETUNE_ON_RAW = "finetune_on_raw"


_STRATEGY_BY_PAYLOAD = {
    "none": Strategy.PRETRAINED_ONLY,
    "feature": Strategy.FEATURE_CONDITIONED_THEN_FINETUNE,
    "raw": Strategy.FINETUNE_ON_RAW,
}


@dataclass
class RolePlan:
    role: SegmentRole
    strategy: Strategy
    description: str
    references: list[np.ndarray] = field(default_factory=list)
    conditioned_reference_count: int = DEFAULT_CONDITIONED_REFERENCES

    @property
    def bare_prompt(self) -> str:
        return f"a {self.description}" if self.role.is_target else self.description


@dataclass
class FineTunePlan:
    roles: dict[SegmentRole, RolePlan]
    preference: str
    fine_tune_config: dict = field(default_factory=lambda: dict(DIFFUSION_FINE_TUNE_DEFAULTS))

    def for_role(self, role: SegmentRole) -> RolePlan:
        return self.roles[role]


@dataclass(frozen=True)
class TargetPrompt:
    role: SegmentRole
    class_name: str | None
    text: str


@dataclass
class PromptSet:
    target_prompts: list[TargetPrompt]
    background_prompt: str


@dataclass
class Placement:
    """Where a generated target lands on the canvas.

    ``bbox`` is the tight box of the placed alpha; ``background_mask`` is
    its complement (the region the background model fills in).
    """

    bbox: BBox
    scale: float
    background_mask: np.ndarray
    origin: tuple[int, int]
    size: tuple[int, int]

    @property
    def alpha(self) -> np.ndarray:
        return ~self.background_mask


def plan_fine_tune(
    bundle: SanitizedBundle,
    *,
    conditioned_reference_count: int = DEFAULT_CONDITIONED_REFERENCES,
    fine_tune_config: dict | None = None,
) -> FineTunePlan:
    """Decide each role's strategy from its payload kind.

    Text-only roles use the pretrained generator; feature payloads generate
    conditioned references first and then fine-tune; raw payloads fine-tune
    directly.  The decision never looks at pixel values.
    """
    roles: dict[SegmentRole, RolePlan] = {}
    for role in bundle.request.roles:
        kinds = set()
        references = []
        for entry in bundle.images:
            matches = [s for s in entry.segments if s.role == role]
            if len(matches) != 1:
                raise InconsistentBundleError(
                    f"image {entry.name!r} has {len(matches)} segments for role {role}"
                )
            segment = matches[0]
            kinds.add(segment.payload_kind)
            if segment.payload is not None:
                references.append(segment.payload)
        if len(kinds) != 1:
            raise InconsistentBundleError(
                f"role {role} mixes payload kinds across images: {sorted(kinds)}"
            )
        roles[role] = RolePlan(
            role,
            _STRATEGY_BY_PAYLOAD[kinds.pop()],
            bundle.request.text_for(role),
            references,
            conditioned_reference_count,
        )
    return FineTunePlan(
        roles,
        bundle.preference.spell(bundle.request),
        dict(fine_tune_config or DIFFUSION_FINE_TUNE_DEFAULTS),
    )


def build_prompts(request: UserRequest, template: str = PROMPT_TEMPLATE) -> PromptSet:
    """Cartesian product of target descriptions and label classes.

    Detection requests with no classes get a single bare prompt per target.
    """
    prompts: list[TargetPrompt] = []
    for i, target in enumerate(request.target_objects):
        role = SegmentRole.target(i)
        if request.label_classes:
            for cls in request.label_classes:
                prompts.append(TargetPrompt(role, cls, template.format(target=target, label=cls)))
        else:
            prompts.append(TargetPrompt(role, None, f"a {target}"))
    return PromptSet(prompts, request.background)


def _tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise PlacementInfeasibleError("target alpha mask is empty")
    return int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)


def sample_placement(
    canvas_size: tuple[int, int],
    target_alpha: np.ndarray,
    rng: np.random.Generator | int,
    scale_range: tuple[float, float] = DEFAULT_SCALE_RANGE,
) -> Placement:
    """Uniformly sample a scale and a fully-contained position for a target.

    The scale is drawn relative to the canvas height; the upper bound is
    trimmed so the scaled target always fits horizontally.  Deterministic
    for a fixed seed.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(np.uint64(rng))
    canvas_w, canvas_h = canvas_size
    imaging.ensure_mask(target_alpha)
    x0, y0, tw, th = _tight_bbox(target_alpha)
    crop = target_alpha[y0 : y0 + th, x0 : x0 + tw]

    lo, hi = scale_range
    aspect = tw / th
    fit_cap = canvas_w / (aspect * canvas_h)
    hi = min(hi, fit_cap, 1.0)
    if hi < lo:
        raise PlacementInfeasibleError(
            f"target with aspect {aspect:.3f} cannot fit the canvas at minimum scale {lo}"
        )
    s = float(rng.uniform(lo, hi))
    out_h = max(1, round(s * canvas_h))
    factor = out_h / th
    out_w = max(1, min(canvas_w, round(tw * factor)))
    scaled = imaging.resize_nearest(crop, out_w, out_h)
    if not scaled.any():
        scaled[out_h // 2, out_w // 2] = True

    px = int(rng.integers(0, canvas_w - out_w + 1))
    py = int(rng.integers(0, canvas_h - out_h + 1))
    placed = np.zeros((canvas_h, canvas_w), dtype=np.bool_)
    placed[py : py + out_h, px : px + out_w] = scaled
    bx, by, bw, bh = _tight_bbox(placed)
    return Placement(
        bbox=BBox(float(bx), float(by), float(bw), float(bh)),
        scale=factor,
        background_mask=~placed,
        origin=(px, py),
        size=(out_w, out_h),
    )


def place_target(
    image: np.ndarray, target_alpha: np.ndarray, placement: Placement
) -> tuple[np.ndarray, np.ndarray]:
    """Scale the target crop per the placement and paste it on a zero canvas."""
    x0, y0, tw, th = _tight_bbox(target_alpha)
    crop_img = image[y0 : y0 + th, x0 : x0 + tw]
    out_w, out_h = placement.size
    scaled_img = imaging.resize_nearest(crop_img, out_w, out_h)
    alpha = placement.alpha
    canvas = np.zeros(alpha.shape + scaled_img.shape[2:], dtype=np.uint8)
    px, py = placement.origin
    region = canvas[py : py + out_h, px : px + out_w]
    region_alpha = alpha[py : py + out_h, px : px + out_w]
    region[region_alpha] = scaled_img[region_alpha]
    return canvas, alpha


def prepare_models(plan: FineTunePlan, backend: Backend, *, seed: int = 0) -> dict[SegmentRole, str]:
    """Run the plan's fine-tune steps; returns the model ref per role."""
    refs: dict[SegmentRole, str] = {}
    n_targets = sum(1 for r in plan.roles if r.is_target)
    for role, role_plan in plan.roles.items():
        key = role.key(n_targets)
        try:
            if role_plan.strategy is Strategy.PRETRAINED_ONLY:
                refs[role] = PRETRAINED_REF
            elif role_plan.strategy is Strategy.FINETUNE_ON_RAW:
                refs[role] = backend.fine_tune(key, role_plan.references, plan.fine_tune_config)
            else:
                conditioned = backend.condition_generate(
                    role_plan.references,
                    role_plan.bare_prompt,
                    _derive_seed(seed, "condition", key),
                    role_plan.conditioned_reference_count,
                )
                refs[role] = backend.fine_tune(key, conditioned, plan.fine_tune_config)
        except GenerationFailedError:
            raise
        except Exception as exc:
            raise GenerationFailedError(
                f"fine-tune step failed for role {key}: {exc}"
            ) from exc
    return refs


def _derive_seed(seed: int, *parts) -> int:
    entropy = [np.uint64(abs(hash_stable(p))) for p in parts]
    seq = np.random.SeedSequence([np.uint64(seed)] + entropy)
    return int(seq.generate_state(1, np.uint64)[0])


def hash_stable(value) -> int:
    import hashlib

    return int.from_bytes(hashlib.sha256(str(value).encode()).digest()[:8], "big")


def assemble_dataset(
    request: UserRequest,
    plan: FineTunePlan,
    backend: Backend,
    count_per_class: int,
    seed: int,
    *,
    canvas_size: tuple[int, int] = (64, 64),
    model_refs: dict[SegmentRole, str] | None = None,
    scale_range: tuple[float, float] = DEFAULT_SCALE_RANGE,
) -> SyntheticDataset:
    """Generate the labeled dataset in three steps per sample: generate the
    target(s), sample a placement and background mask, then inpaint the
    background and composite.

    Classification datasets hold ``count_per_class`` samples per prompt;
    detection datasets hold ``count_per_class`` samples total.
    """
    if count_per_class < 1:
        raise InvalidArgumentError("count_per_class must be >= 1")
    prompts = build_prompts(request)
    if model_refs is None:
        model_refs = prepare_models(plan, backend, seed=seed)
    n_targets = len(request.target_objects)
    bg_ref = model_refs[SegmentRole.background()]

    if request.task_kind is TaskKind.CLASSIFICATION:
        schedule = [tp for tp in prompts.target_prompts for _ in range(count_per_class)]
    else:
        schedule = [
            prompts.target_prompts[i % len(prompts.target_prompts)]
            for i in range(count_per_class)
        ]

    samples: list[SyntheticSample] = []
    for sample_index, tp in enumerate(schedule):
        sample_seed = _derive_seed(seed, "sample", sample_index)
        try:
            placed_imgs = []
            placed_alphas = []
            boxes: list[tuple[int, BBox]] = []
            for i in range(n_targets):
                role = SegmentRole.target(i)
                prompt = tp.text if role == tp.role else f"a {request.target_objects[i]}"
                image, alpha = backend.generate(
                    model_refs[role],
                    prompt,
                    _derive_seed(sample_seed, "target", i),
                    want_alpha=True,
                )
                if alpha is None:
                    raise GenerationFailedError(
                        f"backend returned no alpha mask for prompt {prompt!r}"
                    )
                placement = sample_placement(
                    canvas_size,
                    alpha,
                    np.random.default_rng(np.uint64(_derive_seed(sample_seed, "placement", i))),
                    scale_range,
                )
                canvas, placed_alpha = place_target(image, alpha, placement)
                placed_imgs.append(canvas)
                placed_alphas.append(placed_alpha)
                boxes.append((i, placement.bbox))

            combined_alpha = np.zeros(placed_alphas[0].shape, dtype=np.bool_)
            target_canvas = np.zeros_like(placed_imgs[0])
            for canvas, alpha in zip(placed_imgs, placed_alphas):
                target_canvas[alpha] = canvas[alpha]
                combined_alpha |= alpha
            filled = backend.inpaint(
                bg_ref,
                target_canvas,
                ~combined_alpha,
                prompts.background_prompt,
                _derive_seed(sample_seed, "background"),
            )
            final = imaging.composite(target_canvas, combined_alpha, filled)
        except (GenerationFailedError, PlacementInfeasibleError):
            raise
        except Exception as exc:
            raise GenerationFailedError(
                f"generation failed at sample {sample_index} (prompt {tp.text!r}): {exc}"
            ) from exc

        label = tp.class_name if request.task_kind is TaskKind.CLASSIFICATION else boxes
        samples.append(
            SyntheticSample(
                image=final,
                label=label,
                provenance=Provenance(
                    prompt=tp.text,
                    preference=plan.preference,
                    strategy=plan.for_role(tp.role).strategy.value,
                    seed=sample_seed,
                ),
                target_mask=combined_alpha,
            )
        )
    return SyntheticDataset(request, samples, seed)


def mix_datasets(a: SyntheticDataset, b: SyntheticDataset, seed: int) -> SyntheticDataset:
    """Balanced 50/50 per-class mixture of two datasets for the same request.

    Keeps min(|a|, |b|) samples per class (total for detection), half drawn
    from each side, shuffled deterministically.
    """
    if a.task_kind != b.task_kind or a.request.label_classes != b.request.label_classes:
        raise IncompatibleDatasetsError(
            "datasets must share task kind and label classes to be mixed"
        )
    rng = np.random.default_rng(np.uint64(seed))

    def tagged(samples, tag):
        return [
            replace_sample_source(s, tag) for s in samples
        ]

    out: list[SyntheticSample] = []
    if a.task_kind is TaskKind.CLASSIFICATION:
        for cls in a.request.label_classes:
            in_a = [s for s in a.samples if s.label == cls]
            in_b = [s for s in b.samples if s.label == cls]
            n = min(len(in_a), len(in_b))
            if n == 0:
                continue
            take_a = (n + 1) // 2
            take_b = n - take_a
            pick_a = sorted(rng.permutation(len(in_a))[:take_a].tolist())
            pick_b = sorted(rng.permutation(len(in_b))[:take_b].tolist())
            out.extend(tagged([in_a[i] for i in pick_a], "a"))
            out.extend(tagged([in_b[i] for i in pick_b], "b"))
    else:
        n = min(len(a), len(b))
        take_a = (n + 1) // 2
        pick_a = sorted(rng.permutation(len(a))[:take_a].tolist())
        pick_b = sorted(rng.permutation(len(b))[: n - take_a].tolist())
        out.extend(tagged([a.samples[i] for i in pick_a], "a"))
        out.extend(tagged([b.samples[i] for i in pick_b], "b"))
    order = rng.permutation(len(out))
    return SyntheticDataset(a.request, [out[i] for i in order], seed)


def replace_sample_source(sample: SyntheticSample, source: str) -> SyntheticSample:
    return SyntheticSample(
        image=sample.image,
        label=sample.label,
        provenance=replace(sample.provenance, source=source),
        target_mask=sample.target_mask,
    )
