# %% End to end at desk scale: pretrain a small denoiser on synthetic
# textures, learn one prompt bank per style, fit the content adapter, then
# stylise a held-out content image. Short schedules keep this to a couple of
# minutes; the acceptance suite trains much longer.
import torch

from promptstyle.bank import DspaTrainConfig, init_prompt_bank, train_dspa
from promptstyle.control import ContentEncoder, KcfpTrainConfig, NullCaptionProvider, init_control_adapter, train_kcfp
from promptstyle.diffusion import ToyDenoiser, toy_schedule
from promptstyle.metrics import MomentFeatures, diversity_score, perceptual_distance
from promptstyle.pipeline import StylizeRequest, stylize
from promptstyle.toy import PretrainConfig, content_images, pretrain_backbone, texture_images

torch.set_num_threads(1)
styles = {s: texture_images(s, 64, seed=0) for s in ("ember", "glacier")}
contents = content_images(128, seed=0)

# %% backbone: frozen after this cell
bb = pretrain_backbone(styles | {"content": contents}, model=ToyDenoiser(widths=(16, 32, 32)),
                       sched=toy_schedule(64), cfg=PretrainConfig(steps=600))
model, sched = bb.model, bb.sched
print("pretrain loss", sum(bb.losses[-50:]) / 50)

# %% stage one: a prompt bank for "ember"
bank = init_prompt_bank(32, 8, model.conditioning_dim, seed=1)
hist = train_dspa(bank, model, styles["ember"], DspaTrainConfig(steps=400, seed=3), sched)
print("dspa loss", hist.losses[-1].dspa, "ortho", hist.losses[-1].ortho)

# %% stage two: the content adapter
enc = ContentEncoder(0)
adapter = init_control_adapter(model)
train_kcfp(adapter, model, contents, NullCaptionProvider(8, model.conditioning_dim), enc, sched,
           KcfpTrainConfig(learning_rate=1e-3, steps=300))
print("kcfp loss", adapter.final_loss)

# %% stylise one held-out image with and without content control
content = content_images(1, seed=77)[0]
fx = MomentFeatures()
for label, ad in (("adapter", adapter), ("no adapter", None)):
    res = stylize(StylizeRequest(content, gamma=1.0, strength=0.75, seed=0, num_samples=4), bank, ad, model, enc, sched)
    d = sum(perceptual_distance(content, im, fx) for im in res.images) / 4
    print(f"{label:10s} content distance {d:.4f} diversity {diversity_score(res.images, fx):.4f}")
