"""Drive every CLI workflow in sequence on a scratch directory.

Runs synth-data -> train -> generate -> eval -> report through the same
entry point the `anogen` console script uses. The default "toy" scale
finishes in well under a minute; "desk" uses the desk preset defaults and
takes roughly 40 minutes on one CPU core.
"""

import argparse
import sys
import tempfile
from pathlib import Path

from anogen import cli

TOY = """\
corpus.resolution = 16
corpus.families = stripes, checker
corpus.defects = stain
corpus.normal_train = 6
corpus.normal_test = 3
corpus.anomalies_per_defect = 3
model.resolution = 16
model.widths = 8, 12
model.attn_levels = 1
model.token_dim = 16
model.attn_dim = 16
model.time_dim = 16
model.pos_channels = 4
model.groups = 4
schedule.steps = 6
backbone.steps = 30
backbone.batch_size = 2
embed.steps = 8
embed.batch_size = 2
embed.k_tokens = 2
embed.n_tokens = 2
encoder.stages = 4, 8
encoder.fpn_width = 8
mask.steps = 6
mask.batch_size = 2
mask.k_tokens = 2
generate.count = 2
generate.guidance_scale = 1.5
eval.localizer_steps = 40
eval.localizer_batch = 4
eval.localizer_widths = 8, 12
eval.classifier_steps = 40
eval.classifier_batch = 8
eval.is_splits = 1
"""


def run(argv) -> None:
    print(f"\n$ anogen {' '.join(argv)}")
    rc = cli.main(argv)
    if rc != 0:
        sys.exit(f"command failed with exit code {rc}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scale", choices=("toy", "desk"), default="toy")
    ap.add_argument("--workdir", help="directory to run in (default: a tempdir)")
    args = ap.parse_args()

    work = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix="anogen-demo-"))
    work.mkdir(parents=True, exist_ok=True)
    conf = work / "demo.conf"
    body = TOY if args.scale == "toy" else ""
    conf.write_text(body + f"dataset_root = {work / 'corpus'}\n"
                    f"output_root = {work / 'run'}\n", encoding="utf-8")
    print(f"workspace: {work}")

    for command in ("synth-data", "train", "generate", "eval", "report"):
        run([command, "--config", str(conf)])
    print(f"\ndone; outputs under {work / 'run'}")


if __name__ == "__main__":
    main()
