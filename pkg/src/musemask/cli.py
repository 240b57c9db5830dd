"""``musemask`` command line: data generation, training, editing and evaluation."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import ConfigError, MuseMaskError
from .semantic_maps import read_map


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file overriding the built-in defaults")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--deterministic", action="store_true", help="single-thread exact-replay mode")
    common.add_argument("--out", type=Path, help="run directory (artifacts are read from and written to it)")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="musemask", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in pipeline.COMMANDS:
        sub.add_parser(name, parents=[common])
    sub.add_parser("eval", parents=[common])
    grid = sub.add_parser("sample-grid", parents=[common])
    grid.add_argument("--scenes", type=int, default=4)
    grid.add_argument("--dest", type=Path)

    edit = sub.add_parser("edit", parents=[common])
    edit.add_argument("--reference", type=Path, required=True, help="reference image (PPM P6)")
    edit.add_argument("--map", type=Path, help="label map of the reference (PGM P5)")
    edit.add_argument("--edit-text", help='e.g. "long hair"')
    edit.add_argument("--caption", required=True, help="caption of the edited image")
    edit.add_argument("--mode", choices=("edit", "insert"), default="edit")
    edit.add_argument("--mask", type=Path, help="optional coarse region (PGM, nonzero = editable)")
    edit.add_argument("--task", type=Path, help="task JSON instead of --map/--edit-text/--mask")
    edit.add_argument("--steps", type=int, help="sampler steps")
    edit.add_argument("--guidance", type=float, help="classifier-free guidance scale")
    edit.add_argument("--dest", type=Path, help="output directory (default: <run>/edit)")
    return parser


def _edit_request(args) -> pipeline.EditRequest:
    if args.task is not None:
        request = pipeline.EditRequest.from_task_file(args.task, args.reference, args.caption)
        if args.seed is not None:
            request.seed = args.seed
        return request
    if args.map is None or args.edit_text is None:
        raise ConfigError("edit needs --map and --edit-text (or --task)")
    mask = read_map(args.mask, num_classes=256).labels > 0 if args.mask is not None else None
    return pipeline.EditRequest(args.reference, args.map, args.edit_text, args.caption, args.mode, mask,
                                args.seed or 0, args.steps, args.guidance)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = pipeline.RunConfig.load(args.config, args.seed, args.deterministic, args.out)
        if args.print_config:
            sys.stdout.write(cfg.to_json())
            return 0
        request = _edit_request(args) if args.command == "edit" else None
        pipeline.prepare(cfg)
        if args.command == "edit":
            result = pipeline.cmd_edit(cfg, request, args.dest or cfg.run_dir / "edit")
        elif args.command == "eval":
            result = json.loads(pipeline.cmd_eval(cfg).to_json())
        elif args.command == "sample-grid":
            result = {"grid": str(pipeline.cmd_sample_grid(cfg, args.scenes, args.dest))}
        else:
            result = pipeline.COMMANDS[args.command](cfg)
    except MuseMaskError as exc:
        print(f"musemask {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    sys.stdout.write(json.dumps(result, sort_keys=True, default=str) + "\n")
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
