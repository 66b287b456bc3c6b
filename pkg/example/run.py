import logging
from pathlib import Path

from cemcd import SynthesisConfig, TrainConfig, build_model, evaluate, load_model, synthesize_dataset, train
from cemcd.metrics import format_report
from cemcd.train import seed_everything

OUT = Path("runs/example")

if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

    samples = synthesize_dataset(SynthesisConfig(num_samples=24, tile_size=128, change_fraction_target=0.05))
    train_set, test_set = samples[:20], samples[20:]

    config = TrainConfig(epochs=10, batch_size=4, crop_size=128)
    seed_everything(config.seed)
    result = train(build_model(config.model), train_set, config, val_data=test_set, out_dir=OUT)
    assert result.best_checkpoint is not None

    model, _ = load_model(result.best_checkpoint)
    print(format_report(evaluate(model, test_set, tta=True).report))  # noqa
