"""
Second-order vs first-order pooling on equal-mean classes
=========================================================

Every class has the same mean, so only the covariance tells them apart.
Average pooling should stay at chance while the SMSO head separates the
classes.
"""

from smso import trainer

config = trainer.Config(epochs=15)
data = trainer.gen_dataset(trainer.SyntheticDatasetSpec.from_config(config))
print("train/val/test sizes:", {s: len(data[s]) for s in trainer.SPLITS})

for head in ("smso", "bp", "gap"):
    metrics, model = trainer.train(config.replace(head=head), data)
    test_loss, test_acc = trainer.evaluate_model(model, data["test"])
    print(f"{head:5s} val acc {metrics.val_acc[-1]:.3f}  test acc {test_acc:.3f}  "
          f"final train loss {metrics.train_loss[-1]:.4f}")

# variants of the SMSO head
for name, change in [("no scale/bias", dict(scale_bias=False)),
                     ("no transform", dict(transform="none")),
                     ("absorbed alpha", dict(alpha_mode="absorb")),
                     ("projection path", dict(mode="alternative"))]:
    metrics, _ = trainer.train(config.replace(**change), data)
    print(f"{name:16s} val acc {metrics.val_acc[-1]:.3f}")
