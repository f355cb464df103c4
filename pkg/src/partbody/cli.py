"""Command-line surface.

Subcommands: simulate, encode, decode, eval, ablate, render. Options
can come from a JSON config file (--config) and are overridden by
explicit flags. Exit codes: 0 success, 1 validation error, 2 I/O
error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .assignment import AlignmentConfig
from .decoder import NmsConfig, decode_pipeline
from .encoder import EncodingError
from .formats import (
    AnnotationError,
    DumpFormatError,
    load_annotations,
    load_detections,
    read_prediction_dump,
    save_annotations,
    save_detections,
    write_ablation_report,
    write_metrics,
    write_prediction_dump,
)
from .geometry import ClassSchema, GeometryError, default_capacity, make_levels
from .metrics import EvalPair, evaluate
from .simulator import (
    AblationConfig,
    NoiseSpec,
    PartSpec,
    SceneSpec,
    SimulationError,
    ablation_suite,
    generate_scene,
    render_predictions,
)
from .svg import render_detections_svg, render_scene_svg

PRESETS = {
    "bodyhands": NmsConfig.body_hands(),
    "cocohumanparts": NmsConfig.human_parts(),
}


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--lam", type=float, default=None, help="association offset scale (default 2.0)")
    p.add_argument("--strides", default=None, help="comma-separated strides (default 8,16,32)")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None,
                   help="NMS threshold preset")
    p.add_argument("--body-conf", type=float, default=None)
    p.add_argument("--body-iou", type=float, default=None)
    p.add_argument("--part-conf", type=float, default=None)
    p.add_argument("--part-iou", type=float, default=None)
    p.add_argument("--capacity", default=None,
                   help='per-class matching capacity, e.g. "hand=2,head=1"')
    p.add_argument("--contain-mode", choices=["center", "full"], default=None)
    p.add_argument("--seed", type=int, default=None)


class Settings:
    """Flag > config file > default resolution for the shared options."""

    def __init__(self, args):
        self.file = {}
        if args.config:
            self.file = json.loads(Path(args.config).read_text(encoding="utf-8"))
        self.args = args

    def get(self, flag_value, key, default):
        if flag_value is not None:
            return flag_value
        return self.file.get(key, default)

    @property
    def lam(self) -> float:
        return float(self.get(self.args.lam, "lambda", 2.0))

    @property
    def strides(self) -> tuple[int, ...]:
        raw = self.get(self.args.strides, "strides", "8,16,32")
        if isinstance(raw, str):
            return tuple(int(s) for s in raw.split(","))
        return tuple(int(s) for s in raw)

    @property
    def seed(self) -> int:
        return int(self.get(self.args.seed, "seed", 0))

    @property
    def contain_mode(self) -> str:
        return self.get(self.args.contain_mode, "contain_mode", "center")

    def nms(self) -> NmsConfig:
        preset = self.get(self.args.preset, "preset", None)
        base = PRESETS[preset] if preset else NmsConfig()
        return NmsConfig(
            body_conf=self.get(self.args.body_conf, "body_conf", base.body_conf),
            body_iou=self.get(self.args.body_iou, "body_iou", base.body_iou),
            part_conf=self.get(self.args.part_conf, "part_conf", base.part_conf),
            part_iou=self.get(self.args.part_iou, "part_iou", base.part_iou),
        )

    def capacity(self, schema: ClassSchema) -> dict[int, int]:
        raw = self.get(self.args.capacity, "capacity", None)
        if raw is None:
            return default_capacity(schema)
        table = default_capacity(schema)
        if isinstance(raw, dict):
            entries = raw.items()
        else:
            entries = (item.split("=", 1) for item in raw.split(",") if item)
        for name, count in entries:
            table[schema.index_of(str(name).strip())] = int(count)
        return table

    def echo(self, schema: ClassSchema | None = None) -> dict:
        cfg = self.nms()
        out = {
            "lambda": self.lam,
            "strides": list(self.strides),
            "seed": self.seed,
            "contain_mode": self.contain_mode,
            "nms": {
                "body_conf": cfg.body_conf,
                "body_iou": cfg.body_iou,
                "part_conf": cfg.part_conf,
                "part_iou": cfg.part_iou,
            },
        }
        if schema is not None:
            out["capacity"] = {schema.name_of(k): v for k, v in self.capacity(schema).items()}
        return out


def _scene_spec(settings: Settings, schema: ClassSchema) -> SceneSpec:
    raw = dict(settings.file.get("scene", {}))
    parts = raw.pop("parts", None)
    if parts is not None:
        raw["parts"] = tuple(
            PartSpec(
                class_index=(schema.index_of(p["class"]) if isinstance(p.get("class"), str)
                            else int(p.get("class_index", p.get("class")))),
                prob=float(p.get("prob", 1.0)),
                size_min=float(p.get("size_min", 0.15)),
                size_max=float(p.get("size_max", 0.3)),
                max_count=int(p.get("max_count", 1)),
            )
            for p in parts
        )
    raw.setdefault("seed", settings.seed)
    return SceneSpec(**raw)


def _noise_spec(settings: Settings) -> NoiseSpec | None:
    raw = settings.file.get("noise")
    if not raw:
        return None
    return NoiseSpec(**raw)


def _schema(settings: Settings) -> ClassSchema:
    raw = settings.file.get("classes", "bodyhands")
    if raw == "bodyhands":
        return ClassSchema.body_hands()
    if raw == "cocohumanparts":
        return ClassSchema.human_parts()
    from .formats import schema_from_json

    return schema_from_json(raw)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_simulate(args) -> int:
    settings = Settings(args)
    schema = _schema(settings)
    spec = _scene_spec(settings, schema)
    noise = _noise_spec(settings)
    count = args.count if args.count is not None else int(settings.file.get("count", 10))
    levels = make_levels(settings.strides, spec.width, spec.height)

    scenes = [generate_scene(spec, schema, index=i) for i in range(count)]
    if args.out_annotations:
        save_annotations(args.out_annotations, scenes, schema)
    if args.out_dump:
        items = (
            (s.image_id, render_predictions(s, levels, schema, lam=settings.lam, noise=noise))
            for s in scenes
        )
        write_prediction_dump(args.out_dump, items, schema=schema)
    print(f"simulated {count} scenes (seed {spec.seed})")
    return 0


def _cmd_encode(args) -> int:
    settings = Settings(args)
    loaded = load_annotations(args.annotations)
    if loaded.resolved_parents:
        print(f"resolved {loaded.resolved_parents} missing parent links")
    items = (
        (
            scene.image_id,
            render_predictions(
                scene,
                make_levels(settings.strides, scene.width, scene.height),
                loaded.schema,
                lam=settings.lam,
            ),
        )
        for scene in loaded.scenes
    )
    write_prediction_dump(args.out, items, schema=loaded.schema)
    print(f"encoded {len(loaded.scenes)} scenes -> {args.out}")
    return 0


def _decode_all(settings: Settings, dump_path):
    decoded = []
    sizes = {}
    schema = None
    for image_id, maps in read_prediction_dump(dump_path):
        schema = maps.schema
        result = decode_pipeline(
            maps,
            settings.nms(),
            settings.capacity(maps.schema),
            mode=settings.contain_mode,
        )
        result.image_id = image_id
        decoded.append(result)
        sizes[image_id] = (maps.image_width, maps.image_height)
    return decoded, sizes, schema


def _cmd_decode(args) -> int:
    settings = Settings(args)
    decoded, sizes, schema = _decode_all(settings, args.dump)
    config = settings.echo(schema)
    config["sizes"] = {str(k): list(v) for k, v in sizes.items()}
    save_detections(args.out, decoded, config=config)
    print(f"decoded {len(decoded)} images -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    settings = Settings(args)
    loaded = load_annotations(args.annotations)
    scenes = {s.image_id: s for s in loaded.scenes}
    if args.dump:
        decoded, _, _ = _decode_all(settings, args.dump)
    else:
        decoded = load_detections(args.detections)
    pairs = []
    for d in decoded:
        if d.image_id not in scenes:
            raise AnnotationError("predictions reference unknown image", d.image_id)
        pairs.append(EvalPair(scene=scenes[d.image_id], predicted=d))
    report = evaluate(
        pairs,
        loaded.schema,
        include_coco=not args.no_coco,
        config_echo=settings.echo(loaded.schema),
    )
    write_metrics(args.out, report)
    parts = ", ".join(
        f"{e['name']}: AP50={_fmt(e['ap50'])}" for e in report.per_class.values()
    )
    print(f"evaluated {len(pairs)} images ({parts}) -> {args.out}")
    return 0


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def _cmd_ablate(args) -> int:
    settings = Settings(args)
    schema = _schema(settings)
    cfg = AblationConfig(
        scene_spec=_scene_spec(settings, schema),
        schema=schema,
        noise=_noise_spec(settings),
        strides=settings.strides,
        lam=settings.lam,
        count=args.count if args.count is not None else int(settings.file.get("count", 20)),
        align=AlignmentConfig(),
        nms=settings.nms(),
        capacity=settings.capacity(schema),
    )
    report = ablation_suite(cfg)
    write_ablation_report(args.out, report)
    for name, block in report["configurations"].items():
        print(f"{name}: cond_acc={_fmt(block['conditional_accuracy'])} "
              f"joint_ap={_fmt(block['joint_ap'])}")
    return 0


def _cmd_render(args) -> int:
    settings = Settings(args)
    if args.detections:
        decoded = load_detections(args.detections)
        match = [d for d in decoded if d.image_id == args.image_id]
        if not match:
            raise AnnotationError("image not present in detections", args.image_id)
        if args.annotations:
            loaded = load_annotations(args.annotations)
            sizes = {s.image_id: (s.width, s.height) for s in loaded.scenes}
            if args.image_id not in sizes:
                raise AnnotationError("image not present in annotations", args.image_id)
            w, h = sizes[args.image_id]
        else:
            doc = json.loads(Path(args.detections).read_text(encoding="utf-8"))
            sizes = doc.get("config", {}).get("sizes", {})
            if str(args.image_id) not in sizes:
                raise AnnotationError("image size unknown; pass --annotations", args.image_id)
            w, h = sizes[str(args.image_id)]
        render_detections_svg(match[0], int(w), int(h), args.out)
    elif args.annotations:
        loaded = load_annotations(args.annotations)
        match = [s for s in loaded.scenes if s.image_id == args.image_id]
        if not match:
            raise AnnotationError("image not present in annotations", args.image_id)
        render_scene_svg(match[0], loaded.schema, args.out)
    else:
        raise AnnotationError("render needs --annotations or --detections")
    print(f"rendered image {args.image_id} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="partbody", description=__doc__)
    parser.add_argument("--version", action="version", version=f"partbody {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic corpus and prediction dump")
    _add_common(p)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--out-annotations")
    p.add_argument("--out-dump")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("encode", help="annotations -> noiseless prediction dump")
    _add_common(p)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("decode", help="prediction dump -> detections/associations JSON")
    _add_common(p)
    p.add_argument("--dump", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("eval", help="annotations + predictions -> metrics JSON")
    _add_common(p)
    p.add_argument("--annotations", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--dump")
    group.add_argument("--detections")
    p.add_argument("--no-coco", action="store_true", help="skip the COCO-style AP sweep")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run the four-configuration ablation suite")
    _add_common(p)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("render", help="render annotations or detections to SVG")
    _add_common(p)
    p.add_argument("--annotations")
    p.add_argument("--detections")
    p.add_argument("--image-id", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (DumpFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except (AnnotationError, EncodingError, GeometryError, SimulationError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
