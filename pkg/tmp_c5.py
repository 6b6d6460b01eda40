import os, time, json

from visemeflow import cli

d = lambda *p: os.path.join("/tmp/vf_c4", *p)
common = ["--seed", "7", "--profile", "desk", "--arch", "desk"]

t0 = time.time()
rc = cli.main(["msi", "--data", d("prep"), "--out", d("msi"), *common])
print(f"msi rc={rc} {time.time()-t0:.0f}s", flush=True)
assert rc == 0
summary = json.load(open(d("msi", "msi.json")))
print("average", summary["average"], flush=True)
print("folds", json.dumps(summary["folds"], indent=1), flush=True)
