"""Learner and eavesdropper accuracy per policy and scenario on the synthetic federated task."""
from _common import parser, read_csv, run_cli


def main():
    args = parser(__doc__, "run_fedsim.json", "fedsim").parse_args()
    out = run_cli("run-fedsim", args)
    print(f"{'policy':8s} {'scenario':12s} {'learner':>8s} {'eavesdropper':>13s} {'finetuned':>10s}")
    for r in read_csv(out / "table.csv"):
        print(f"{r['policy']:8s} {r['scenario']:12s} {float(r['learner_acc']):8.3f} "
              f"{float(r['eavesdropper_acc']):13.3f} {float(r['finetuned_acc']):10.3f}")


if __name__ == "__main__":
    main()
