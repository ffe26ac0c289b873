"""Mean theta2 per oracle state over SPGA iterations, against the exact solver's threshold."""
import json

from _common import parser, read_csv, run_cli


def main():
    args = parser(__doc__, "run_spga_reference.json", "spga_convergence").parse_args()
    out = run_cli("run-spga", args)
    rows = [r for r in read_csv(out / "trace.csv") if r["arrival_state"] == "0"]
    summary = json.loads((out / "summary.json").read_text())
    last = max(int(r["iteration"]) for r in rows)
    for r in rows:
        if int(r["iteration"]) == last:
            key = f"{r['oracle_state']},0"
            print(f"oracle {r['oracle_state']}: theta2 {float(r['theta2']):7.2f}  "
                  f"solver phi2 {summary['solver'][key]['phi2']}")
    if args.plot:
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(6, 4))
        for o in ("1", "2", "3"):
            pts = [(int(r["iteration"]), float(r["theta2"])) for r in rows if r["oracle_state"] == o]
            ax.plot(*zip(*pts), label=f"oracle state {o}")
        ax.set_xlabel("iteration")
        ax.set_ylabel("mean theta2")
        ax.legend()
        fig.savefig(out / "convergence.png", dpi=120, bbox_inches="tight")


if __name__ == "__main__":
    main()
