"""Grad-CAM overlays for a few test scenes of a freshly trained model.

Writes overlay PPMs (heatmap on the scene's RGB rendering) and the label
palette image next to each, so attention can be read against the semantics.
"""
import argparse
from pathlib import Path

import numpy as np

from semreduce import analysis as an
from semreduce import models as m
from semreduce import semantics as sem
from semreduce.scenegen import synthesize


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--preset", default="steernet-seg13", choices=sorted(m.STEER_PRESETS))
    ap.add_argument("--scenes", type=int, default=6)
    ap.add_argument("--alpha", type=float, default=0.5)
    ap.add_argument("--out", default="runs/gradcam")
    args = ap.parse_args(argv)

    ds = synthesize(args.n, seed=args.seed)
    net = m.train_steernet(m.STEER_PRESETS[args.preset], ds, m.HyperParams(epochs=args.epochs, seed=args.seed)).model
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in ds.split("test")[: args.scenes]:
        x = m.encode_inputs(ds, [i], net.input_kind)[0]
        heat = an.grad_cam(net, x)
        pred = float(net.predict(x[None])[0])
        sem.write_ppm(out / f"overlay_{i:06d}.ppm", an.overlay(heat, ds.rgb[i], args.alpha))
        sem.write_ppm(out / f"labels_{i:06d}.ppm", sem.render_palette(sem.SemanticMap(ds.labels[i], ds.label_set)))
        hot = heat >= 0.5
        names = sem.label_histogram(ds.labels[i][hot], ds.label_set) if hot.any() else {}
        top = sorted(names.items(), key=lambda p: -p[1])[:3]
        print(f"scene {i}: steering {ds.steering[i]:+.3f} predicted {pred:+.3f}  "
              f"hot pixels {int(hot.sum())}: " + ", ".join(f"{k} {v}" for k, v in top))
    summary = an.attribution_contrast(net, ds, ds.split("test")[:50])
    print(f"near-line / distractor Grad-CAM intensity: {summary.ratio:.2f} "
          f"({summary.near_line:.3f} vs {summary.distractor:.3f}, {summary.n_scenes} scenes)")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
