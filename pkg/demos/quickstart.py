"""Generate a few synthetic scenes, train a small detector on them, and score it.

A reduced model (32-d tokens, 2 encoder units, 3 decoders) keeps the run to a
couple of minutes on one CPU core. Expect rough masks, not clean detections.

    python demos/quickstart.py
"""
from attrdet.config import Config
from attrdet.evaluation import evaluate
from attrdet.infer import detect
from attrdet.synth import SynthConfig, generate_split
from attrdet.train import train

cfg = Config(embed_dim=32, heads=4, encoder_units=2, num_decoders=3, num_queries=8,
             total_steps=400, lr=1e-3, augment=False, infer_short_side=0)
scenes = generate_split(seed=0, count=4, cfg=SynthConfig())
samples = [s for _, s in scenes]
print("text instances per image:", [len(s.instances) for s in samples])


def progress(rec):
    if rec.step % 50 == 0:
        print(f"step {rec.step:4d}  loss {rec.loss:9.3f}")


model, _ = train(cfg, samples, callback=progress)

dets = {sid: [(d.polygon, d.confidence) for d in detect(model, s.image)] for sid, s in scenes}
gts = {sid: s.instances for sid, s in scenes}
print(evaluate(dets, gts).table())
