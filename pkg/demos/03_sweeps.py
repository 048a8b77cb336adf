"""Vary the iteration count N and the loss weight lambda on the reference task.

Each point retrains from scratch, so the full sweep takes a minute or two.
The same grid is available from the command line:

    promptforge sweep --config reference.cfg --param lambda --values 0,0.5,1.0
"""

from promptforge import evaluate, generate_task, load_config, train

cfg, tcfg = load_config("reference.cfg")
task = generate_task(cfg.seed, cfg.K, tcfg.base_fraction, tcfg.shots, tcfg.noise, cfg, tcfg.test_shots)

print(f"{'setting':>14} {'base':>7} {'novel':>7} {'HM':>7}")
for changes in [dict(N=1), dict(N=2), dict(N=3), dict(lam=0.0), dict(lam=0.5),
                dict(ablate="vgen"), dict(ablate="tgen"), dict(ablate="filter")]:
    run_cfg = cfg.replace(**changes)
    model, _ = train(task, run_cfg, tcfg)
    r = evaluate(model, task)
    label = ",".join(f"{k}={v}" for k, v in changes.items())
    print(f"{label:>14} {r.base_acc:7.2f} {r.new_acc:7.2f} {r.hm:7.2f}")
