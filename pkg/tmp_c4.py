import os, time, json, sys

root = "/tmp/vf_c4"
os.makedirs(root, exist_ok=True)
from visemeflow import cli

d = lambda *p: os.path.join(root, *p)
common = ["--seed", "7", "--profile", "desk", "--arch", "desk"]


def step(argv):
    t0 = time.time()
    rc = cli.main(argv)
    dt = time.time() - t0
    print(f"{argv[0]:<22} rc={rc} {dt:7.1f}s", flush=True)
    assert rc == 0, argv


t_all = time.time()
step(["synth", "--out", d("scenes"), *common,
      "--words", "10", "--speakers", "15", "--occurrences", "10"])
step(["preprocess", "--data", d("scenes"), "--out", d("prep"), *common])
step(["split", "--data", d("prep"), "--out", d("splits"), *common,
      "--protocol", "msd"])
step(["train-cae", "--data", d("prep"), "--splits", d("splits", "splits.json"),
      "--out", d("cae"), *common,
      "--cae-max-epochs", "40", "--cae-patience", "10"])
step(["extract-features", "--data", d("prep"), "--checkpoint", d("cae", "cae.ckpt"),
      "--out", d("feat"), *common])
step(["train-lstm", "--features", d("feat"), "--splits", d("splits", "splits.json"),
      "--out", d("lstm"), *common,
      "--lstm-max-epochs", "80", "--lstm-patience", "20"])
step(["eval", "--data", d("prep"), "--splits", d("splits", "splits.json"),
      "--encoder-checkpoint", d("cae", "cae.ckpt"),
      "--lstm-checkpoint", d("lstm", "lstm.ckpt"), "--out", d("eval"), *common])
rep = json.load(open(d("eval", "report.json")))
print("ACCURACIES", rep["accuracies"], flush=True)
print(f"TOTAL {time.time()-t_all:.0f}s", flush=True)
