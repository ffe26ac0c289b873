"""Share of learning actions as the privacy cost of learning is scaled up."""
from _common import parser, read_csv, run_cli


def main():
    args = parser(__doc__, "cost_sweep.json", "cost_sweep").parse_args()
    out = run_cli("cost-sweep", args)
    rows = read_csv(out / "sweep.csv")
    for r in rows:
        print(f"scale {float(r['cost_scale']):7.1f}: learn fraction {float(r['learn_fraction_sim']):.3f} "
              f"(exact {float(r['learn_fraction_exact']):.3f})")
    if args.plot:
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(6, 4))
        x = [float(r["cost_scale"]) for r in rows]
        ax.plot(x, [float(r["learn_fraction_sim"]) for r in rows], "o-", label="simulated")
        ax.plot(x, [float(r["learn_fraction_exact"]) for r in rows], "k--", lw=0.8, label="stationary")
        ax.set_xscale("symlog")
        ax.set_xlabel("privacy cost scale")
        ax.set_ylabel("fraction of learning actions")
        ax.legend()
        fig.savefig(out / "cost_sweep.png", dpi=120, bbox_inches="tight")


if __name__ == "__main__":
    main()
