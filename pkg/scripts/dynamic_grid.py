"""Dynamic trigger sweep over the loss weight and the perturbation budget."""

from _common import parser, run

if __name__ == "__main__":
    a = parser(__doc__, "runs/dynamic_grid").parse_args()
    run("attack", a.out, ["kind=dynamic", "clean_weights=0.5,0.75,1.0", "budgets=0.01,0.05,0.1", *a.set], a.quick)
