"""Every defense against one static backdoor, with fine-pruning ranked both ways."""

from _common import parser, run

if __name__ == "__main__":
    a = parser(__doc__, "runs/defenses").parse_args()
    for name in ("strip", "spectral", "fine-prune"):
        run("defend", f"{a.out}/{name}", [f"defense={name}", *a.set], a.quick)
    run("defend", f"{a.out}/fine-prune-most", ["defense=fine-prune", "prune_direction=most", *a.set], a.quick)
