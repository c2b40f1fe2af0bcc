"""Train a dynamic backdoor, then compare its SSIM/MSE with static and moving stamps."""

from _common import parser, run

if __name__ == "__main__":
    a = parser(__doc__, "runs/stealth").parse_args()
    ckpt = f"{a.out}/backdoor.ckp"
    run("attack", a.out, ["kind=dynamic", f"checkpoint={ckpt}", *a.set], a.quick)
    run("stealth", a.out, [f"checkpoint={ckpt}", "budgets=0.01,0.05,0.1", *a.set], a.quick)
