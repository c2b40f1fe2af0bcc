"""Moving and smart triggers at the headline budget."""

from _common import parser, run

if __name__ == "__main__":
    a = parser(__doc__, "runs/moving_smart").parse_args()
    run("attack", a.out + "/moving", ["kind=moving", "poison_rates=0.01,0.05,0.1", *a.set], a.quick)
    run("attack", a.out + "/smart", ["kind=smart", "poison_rates=0.01,0.05,0.1", *a.set], a.quick)
