"""Drive the whole command-line workflow on a throwaway synthetic dataset.

synth -> train -> evaluate -> early -> importance -> baseline, each writing
into its own folder under a temporary directory (or ``--workdir``). The same
commands work from a shell as ``yieldnet <subcommand> ...``.

    python demos/cli_pipeline.py --workdir /tmp/yieldnet-demo
"""

import argparse
import os
import tempfile

from yieldnet.cli import main as yieldnet


def run(*argv):
    print("$ yieldnet " + " ".join(argv))
    code = yieldnet(list(argv))
    if code != 0:
        raise SystemExit(f"exit code {code}")
    print()


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", default=None)
    args = parser.parse_args()
    work = args.workdir or tempfile.mkdtemp(prefix="yieldnet-")
    os.makedirs(work, exist_ok=True)

    spec = os.path.join(work, "planted.txt")
    with open(spec, "w") as fh:
        fh.write("# signal in band 2 during month 1\n"
                 "band = 2\nmonth = 1\nnoise = 50\n"
                 "n_regions = 16\nimage_size = 16\ntimesteps = 24\nyears = 2001-2011\n")
    cfg = os.path.join(work, "small.cfg")
    with open(cfg, "w") as fh:
        fh.write("image_size = 16\nconv_layers = 2\nlstm_layers = 1\nlstm_hidden = 32\n"
                 "batch_size = 8\nlearning_rate = 0.003\n")

    def at(name):
        return os.path.join(work, name)

    data = ["--manifest", at("synth/manifest.txt")]
    ckpt = ["--checkpoint", at("train/checkpoint.yckp")]
    run("synth", "--spec", spec, "--out", at("synth"), "--seed", "0")
    run("train", *data, "--config", cfg, "--epochs", "15", "--out", at("train"))
    run("evaluate", *data, *ckpt, "--out", at("evaluate"))
    run("early", *data, *ckpt, "--out", at("early"))
    run("importance", *data, *ckpt, "--n-draws", "2", "--out", at("importance"))
    run("baseline", *data, "--method", "ridge", "--features", "monthly", "--out", at("baseline"))
    print(f"outputs are under {work}")


if __name__ == "__main__":
    main()
