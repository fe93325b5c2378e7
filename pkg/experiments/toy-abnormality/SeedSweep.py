import argparse
from pathlib import Path

import polars as pl

from AAROS.config import RunConfig, load_run_config
from AAROS.evaluation import dev_evaluator, split_samples
from AAROS.judge import make_judge
from AAROS.synthworld import DEV, TEST, TRAIN, apply_split, generate_dataset, select
from AAROS.train import run_aar, run_sft
from AAROS.utils import seed_everything


class SeedSweep:
    def __init__(self, config_path: str, output_path: str, seeds: list[int]):
        self.config_path: str = config_path
        self.output_path: str = output_path
        self.seeds: list[int] = seeds

        self.rows: list[dict] = []
        self.output_dataframe: pl.DataFrame

    def run_seed(self, seed: int):
        """
        Train SFT then AAR from the same checkpoint under one seed and score both on dev and regular test.

        :param seed: The global seed handed to every stage
        """
        config: RunConfig = load_run_config(self.config_path, seed=seed, out=Path(self.output_path).parent)
        seed_everything(seed)
        samples = apply_split(generate_dataset(config.world, config.num_samples), config.split, config.world)
        train, dev, test = select(samples, TRAIN), select(samples, DEV), split_samples(samples, TEST)

        model = run_sft(config.new_model(), train, config.sft).model
        score_dev, score_test = dev_evaluator(dev), dev_evaluator(test)
        sft_dev, sft_test = score_dev(model), score_test(model)

        model = run_aar(
            model, train, config.aar, make_judge(config.judge), max_in_flight=config.judge.max_in_flight
        ).model
        aar_dev, aar_test = score_dev(model), score_test(model)

        self.rows.append(
            {
                "seed": seed,
                "sft_dev_acc": sft_dev["acc"],
                "aar_dev_acc": aar_dev["acc"],
                "sft_dev_mean_iou": sft_dev["mean_iou"],
                "aar_dev_mean_iou": aar_dev["mean_iou"],
                "sft_test_acc": sft_test["acc"],
                "aar_test_acc": aar_test["acc"],
                "improved_both": aar_dev["acc"] >= sft_dev["acc"] and aar_dev["mean_iou"] >= sft_dev["mean_iou"],
            }
        )

    def run(self):
        for seed in self.seeds:
            self.run_seed(seed)
        self.output_dataframe = pl.DataFrame(self.rows)

    def write_csv(self):
        Path(self.output_path).parent.mkdir(parents=True, exist_ok=True)
        self.output_dataframe.write_csv(self.output_path)
        improved = int(self.output_dataframe["improved_both"].sum())
        print(f"AAR matched or beat SFT on dev ACC and mean IoU for {improved} of {len(self.seeds)} seeds")


class SeedSweepArgParser:
    def __init__(self):
        self.parser: argparse.ArgumentParser = argparse.ArgumentParser(
            prog="AAROS SeedSweep",
            description="Compare SFT-only and AAR checkpoints over several seeds on the toy abnormality world",
        )
        self.parser.add_argument("-c", "--config", default=str(Path(__file__).with_name("desk.yaml")), type=str)
        self.parser.add_argument("-o", "--output_path", default="runs/toy-abnormality/seed_sweep.csv", type=str)
        self.parser.add_argument("-s", "--seeds", default=[0, 1, 2], type=int, nargs="+")
        self.main()

    def main(self):
        args: argparse.Namespace = self.parser.parse_args()
        sweep: SeedSweep = SeedSweep(args.config, args.output_path, args.seeds)
        sweep.run()
        sweep.write_csv()


if __name__ == "__main__":
    parser: SeedSweepArgParser = SeedSweepArgParser()
