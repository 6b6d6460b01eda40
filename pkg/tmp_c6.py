import os, time, json

root = "/tmp/vf_c6"
os.makedirs(root, exist_ok=True)
from visemeflow import cli, models, evaluation
from visemeflow.optim import load_checkpoint
from visemeflow.datasets import load_manifest, load_batch

d = lambda *p: os.path.join(root, *p)
common = ["--seed", "7", "--profile", "desk", "--arch", "desk"]


def step(argv):
    t0 = time.time()
    rc = cli.main(argv)
    print(f"{argv[0]:<22} rc={rc} {time.time()-t0:7.1f}s", flush=True)
    assert rc == 0, argv


t_all = time.time()
step(["synth", "--out", d("scenes"), *common,
      "--words", "9", "--speakers", "15", "--occurrences", "67"])
step(["preprocess", "--data", d("scenes"), "--out", d("prep"), "--fixed-roi", *common])
step(["split", "--data", d("prep"), "--out", d("splits"), *common,
      "--protocol", "counts", "--train-count", "900", "--val-count", "50",
      "--test-count", "50"])
SPL = d("splits", "splits.json")
step(["train-cae", "--data", d("prep"), "--splits", SPL, "--out", d("cae"), *common,
      "--cae-max-epochs", "40", "--cae-patience", "10"])
step(["train-baseline-cnn", "--data", d("scenes"), "--splits", SPL,
      "--out", d("cnn"), *common])
step(["extract-features", "--data", d("prep"), "--checkpoint", d("cae", "cae.ckpt"),
      "--out", d("feat_cae"), "--extractor", "cae", *common])
step(["extract-features", "--data", d("prep"), "--checkpoint", d("cnn", "cnn.ckpt"),
      "--out", d("feat_cnn"), "--extractor", "cnn", *common])
step(["train-lstm", "--features", d("feat_cae"), "--splits", SPL,
      "--out", d("lstm_cae"), *common])
step(["train-lstm", "--features", d("feat_cnn"), "--splits", SPL,
      "--out", d("lstm_cnn"), *common])
step(["eval", "--data", d("prep"), "--splits", SPL,
      "--encoder-checkpoint", d("cae", "cae.ckpt"),
      "--lstm-checkpoint", d("lstm_cae", "lstm.ckpt"), "--out", d("eval_cae"), *common])
step(["eval", "--data", d("prep"), "--splits", SPL,
      "--encoder-checkpoint", d("cnn", "cnn.ckpt"),
      "--lstm-checkpoint", d("lstm_cnn", "lstm.ckpt"), "--out", d("eval_cnn"), *common])

cae_acc = json.load(open(d("eval_cae", "report.json")))["accuracies"]
cnn_acc = json.load(open(d("eval_cnn", "report.json")))["accuracies"]
print("CAE ", cae_acc, flush=True)
print("CNN ", cnn_acc, flush=True)
print("ordering ok:", cae_acc["test"] >= cnn_acc["test"] - 0.02, flush=True)

man = load_manifest(d("prep", "manifest.jsonl"))
video, _ = load_batch(man, [0])
frame = video[0, 0, 0]
scores = {}
for name, ck in (("cae", d("cae", "cae.ckpt")), ("cnn", d("cnn", "cnn.ckpt"))):
    c = load_checkpoint(ck, name_filter="enc.*")
    desc = models.descriptor_from_dict(c.architecture)
    fm = evaluation.first_layer_feature_maps(c.params, desc, frame)
    scores[name] = evaluation.emptiness_score(fm)
print("emptiness", scores, "ok:", scores["cae"] <= scores["cnn"], flush=True)
print(f"TOTAL {time.time()-t_all:.0f}s", flush=True)
