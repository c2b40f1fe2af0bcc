"""Low-rate attacker versus fine-pruning: kinds x rates x prune fractions."""

from _common import parser, run

if __name__ == "__main__":
    a = parser(__doc__, "runs/adaptive").parse_args()
    run("defend", a.out, ["defense=adaptive", "kinds=static,moving", "poison_rates=0.001,0.01",
                          "prune_fracs=0.1,0.3,0.5", *a.set], a.quick)
