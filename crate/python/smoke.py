"""Exercise the compiled `nasb` module end to end.

Build first, e.g. `pip install --no-build-isolation ./crates/python`.
"""

import json
import math
import os
import subprocess
import sys
import tempfile

import nasb


def check(cond, msg):
    if not cond:
        sys.exit(f"smoke: {msg}")


def main():
    mbit, flops = nasb.cost("resnet18", policy="full")
    check(abs(mbit / 374.1 - 1) < 0.02 and abs(flops / 1.81e9 - 1) < 0.02, f"resnet18 cost {mbit} {flops}")
    report = json.loads(nasb.cost_json("nasb-resnet18"))
    check(report["layers"] and report["memory_saving"] > 1, "nasb-resnet18 report")

    p = nasb.path_weights([0.0, 1.0, 2.0])
    check(abs(sum(p) - 1) < 1e-12 and p[2] > p[1] > p[0], f"path weights {p}")

    signs, scales = nasb.binarize([0.5, -1.5, 0.0, 2.0], [2, 2])
    check(signs == [1.0, -1.0, 1.0, 1.0] and scales == [1.0, 1.0], f"binarize {signs} {scales}")

    pixels, shape, labels = nasb.synthetic(samples=20, seed=4)
    check(len(pixels) == math.prod(shape) and len(labels) == 20, "synthetic shape")
    check(nasb.synthetic(samples=20, seed=4) == (pixels, shape, labels), "synthetic determinism")

    try:
        nasb.cost("resnet19")
        check(False, "unknown preset accepted")
    except ValueError:
        pass

    cli = os.environ.get("NASB_CLI")
    with tempfile.TemporaryDirectory() as d:
        img, lbl = os.path.join(d, "x.ntsr"), os.path.join(d, "y.nlbl")
        nasb.write_synthetic(img, lbl, samples=64, seed=2)
        if cli:
            def run(*args):
                subprocess.run([cli, *args], check=True, cwd=d, stdout=subprocess.DEVNULL)

            run("search", "--images", img, "--labels", lbl, "--epochs", "1", "--out", "s.ckpt")
            geno = json.loads(nasb.derive_genotype(os.path.join(d, "s.ckpt")))
            check(geno["cells"], "derived genotype")
            with open(os.path.join(d, "g.json"), "w") as f:
                f.write(nasb.derive_genotype(os.path.join(d, "s.ckpt")))
            run("pretrain", "--genotype", "g.json", "--images", img, "--labels", lbl, "--epochs", "1", "--out", "p.ckpt")
            loss, top1, topk = nasb.evaluate_checkpoint(os.path.join(d, "p.ckpt"), img, lbl)
            check(loss > 0 and 0 <= top1 <= topk <= 1, f"evaluate {loss} {top1} {topk}")

    print(f"smoke ok (nasb {nasb.__version__})")


if __name__ == "__main__":
    main()
