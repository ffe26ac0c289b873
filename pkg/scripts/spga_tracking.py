"""Constant-step SPGA with a mid-run change in arrival rate and batch size."""
import json

from _common import parser, read_csv, run_cli


def main():
    args = parser(__doc__, "run_spga_tracking.json", "spga_tracking").parse_args()
    out = run_cli("run-spga", args)
    rows = [r for r in read_csv(out / "trace.csv") if r["arrival_state"] == "0" and r["oracle_state"] == "1"]
    target = json.loads((out / "summary.json").read_text())["solver"]["1,0"]["phi2"]
    for r in rows[::500]:
        print(f"iteration {int(r['iteration']):5d}: theta2 {float(r['theta2']):6.2f}")
    print(f"threshold after the switch: {target}")
    if args.plot:
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([int(r["iteration"]) for r in rows], [float(r["theta2"]) for r in rows], label="oracle state 1")
        ax.axhline(target, ls="--", c="k", lw=0.8, label="solver threshold after switch")
        ax.set_xlabel("iteration")
        ax.set_ylabel("mean theta2")
        ax.legend()
        fig.savefig(out / "tracking.png", dpi=120, bbox_inches="tight")


if __name__ == "__main__":
    main()
