"""Supervised-only vs full distillation students over several seeds.

    python scripts/directional_experiment.py --teacher runs/exp/teacher.akd

The teacher checkpoint is reused when it exists.  Exits 0 when the
distilled student has the lower held-out cross-entropy on at least
--min-wins seeds.
"""

import argparse
import logging
import sys

from alignkd.experiment import ExperimentConfig, run_experiment


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--teacher", default="runs/exp/teacher.akd")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--student-steps", type=int, default=1500)
    ap.add_argument("--teacher-steps", type=int, default=2000)
    ap.add_argument("--student-samples", type=int, default=256)
    ap.add_argument("--min-wins", type=int, default=4)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = ExperimentConfig(
        seeds=tuple(args.seeds),
        student_steps=args.student_steps,
        teacher_steps=args.teacher_steps,
        student_samples=args.student_samples,
    )
    res = run_experiment(cfg, args.teacher)
    print(f"teacher held-out CE {res.teacher_ce:.4f}")
    print("seed  supervised  distilled  winner")
    for r in res.seeds:
        print(f"{r.seed:>4}  {r.ce_supervised:>10.4f}  {r.ce_distilled:>9.4f}  {'distilled' if r.distilled_wins else 'supervised'}")
    print(f"distilled wins {res.wins}/{len(res.seeds)} in {res.seconds:.0f}s")
    return 0 if res.wins >= args.min_wins else 1


if __name__ == "__main__":
    sys.exit(main())
