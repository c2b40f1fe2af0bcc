"""Static trigger sweep over the poisoning-rate x size x polarity grid."""

from _common import parser, run

if __name__ == "__main__":
    a = parser(__doc__, "runs/static_grid").parse_args()
    run("attack", a.out, ["kind=static", "poison_rates=0.001,0.005,0.01,0.05,0.1", "sizes=0.01,0.1",
                          "polarities=0,1,2,3", *a.set], a.quick)
