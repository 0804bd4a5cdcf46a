"""Train a small bi-scale model on a handful of synthetic sentences and report accuracies."""
import argparse

from chunknmt.corpus import synth_task
from chunknmt.experiment import biscale_config, vocabs_for
from chunknmt.model import Seq2Seq
from chunknmt.training import overfit_probe


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sentences", type=int, default=8)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    examples = synth_task(args.seed, args.sentences)
    vs, vt, vg = vocabs_for(examples)
    model = Seq2Seq(biscale_config(vs, vt, vg, args.dim, args.dim), seed=args.seed)
    r = overfit_probe(model, examples, args.steps, vs, vt, vg)
    print(f"token accuracy {r.token_accuracy:.4f}  boundary accuracy {r.boundary_accuracy:.4f}  "
          f"tag accuracy {r.tag_accuracy:.4f}")


if __name__ == "__main__":
    main()
