"""Two-stage edit on a held-out scene of a trained run.

    python demos/edit_walkthrough.py [RUN_DIR]

Stage 1 rewrites the label map from an attribute phrase, stage 2 repaints the
reference image inside the changed region. Inputs and outputs land in
RUN_DIR/walkthrough as PPM/PGM files.
"""

import sys
from pathlib import Path

import numpy as np

from musemask import pipeline
from musemask.edit_control import edit_region
from musemask.evaluation import edit_tasks
from musemask.semantic_maps import read_image, read_map, write_image
from musemask.synth_dataset import load_corpus, nearest_render_class


def main(run_dir: Path) -> None:
    cfg = pipeline.RunConfig.load(None, deterministic=True, run_dir=run_dir)
    pipeline.prepare(cfg)
    corpus = load_corpus(cfg.corpus_dir)
    out = run_dir / "walkthrough"
    tasks, rows = edit_tasks(corpus, 3, seed=5, with_rows=True)
    for i, (task, row) in enumerate(zip(tasks, rows)):
        sid = corpus.scene_ids[row]
        request = pipeline.EditRequest(corpus.root / "images" / f"{sid}.ppm", corpus.root / "maps" / f"{sid}_n.pgm",
                                       task.edit_text, corpus.captions[row], seed=task.seed)
        dest = out / f"{i}_{sid}"
        record = pipeline.cmd_edit(cfg, request, dest)
        new_map = read_map(dest / "edited_map.pgm")
        image = read_image(dest / "edited.ppm")
        region = edit_region(task.cond_map, new_map, task.target_class)
        agree = np.mean(nearest_render_class(image)[region] == new_map.labels[region]) if region.any() else 1.0
        write_image(corpus.images[row], dest / "reference.ppm")
        write_image(pipeline.colorize(corpus.s_n[row]), dest / "map_before.ppm")
        write_image(pipeline.colorize(new_map.labels), dest / "map_after.ppm")
        print(f"{sid}: '{task.edit_text}' region={int(region.sum())}px agreement={agree:.3f} "
              f"({record['elapsed_s']:.1f}s) -> {dest}")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs/desk"))
