"""Reference external predictor speaking the DKM line protocol.

    python -m dtg.stub_dkm --dim 3 --mode echo
    python -m dtg.stub_dkm --dim 3 --mode constant --value 1 -2 0.5
    python -m dtg.stub_dkm --dim 3 --mode scale --value 2

``--bad-dim`` makes it answer requests with one output too many, for
exercising registration checks.
"""
import argparse
import json
import sys


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--dim", type=int, required=True)
    ap.add_argument("--mode", choices=["echo", "constant", "scale"], default="echo")
    ap.add_argument("--value", type=float, nargs="*", default=[1.0])
    ap.add_argument("--bad-dim", action="store_true")
    args = ap.parse_args(argv)
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        req = json.loads(line)
        if req["id"] == 0 and not req["inputs"]:
            resp = {"id": 0, "outputs": [], "dim": args.dim}
        else:
            x = req["inputs"]
            if args.mode == "echo":
                y = list(x)
            elif args.mode == "constant":
                y = list(args.value) if len(args.value) == args.dim else [args.value[0]] * args.dim
            else:
                y = [args.value[0] * v for v in x]
            if args.bad_dim:
                y = y + [0.0]
            resp = {"id": req["id"], "outputs": y}
        sys.stdout.write(json.dumps(resp) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
