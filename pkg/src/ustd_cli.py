"""
USTD Command-Line Interface

Batch commands for the whole workflow:

    synth     write a synthetic graph and signals
    pretrain  masked encoder pre-training (resumable)
    train     denoiser training for one task
    evaluate  sampling, metrics, baselines, fan charts, exports
    bench     sampling wall-clock of the gated vs joint-attention denoisers

Every command reads the JSON run configuration, applies its flags on top
(CLI flag > config file > default), resolves the seed and returns a process
exit code: 0 on success, 2 for configuration errors, 3 for data errors,
4 for numeric failures and 1 for anything unexpected.
"""

import argparse
import copy
import json
import os
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from src.ustd_config import CONFIG_FILE, ConfigManager, RunConfig, TASKS, resolve_seed
from src.ustd_datasets import save_graph, save_signals, synthesize_graph_signal
from src.ustd_errors import ConfigError, InputError, UstdError
from src.ustd_logging import logger
from src.ustd_metrics import write_reports
from src.ustd_pipeline import (
    ENCODER_CHECKPOINT,
    PretrainManager,
    baseline_sample_sets,
    benchmark_denoisers,
    dataset_paths,
    denoiser_checkpoint_name,
    evaluate_model,
    export_predictions,
    infer,
    load_trained,
    prepare_data,
    seed_everything,
    train_denoiser,
)
from src.ustd_plots import fan_chart, horizon_curve, loss_curve

# Flag destination → configuration key
OVERRIDES = {
    "task": "task",
    "output_dir": "output_dir",
    "n_nodes": "synth.n_nodes",
    "t_total": "synth.t_total",
    "synth_dir": "synth.output_dir",
    "signals": "data.signals_path",
    "adjacency": "data.adjacency_path",
    "mask_ratio": "encoder.mask_ratio",
    "graph_sample_rate": "encoder.sample_rate",
    "pretrain_steps": "encoder.steps",
    "masking": "encoder.masking",
    "graph_sampling": "encoder.graph_sampling",
    "encoder_mode": "train.encoder_mode",
    "encoder_checkpoint": "train.encoder_checkpoint",
    "freeze_encoder": "train.freeze_encoder",
    "sign_flip": "graph.sign_flip",
    "max_epochs": "train.max_epochs",
    "diffusion_steps": "diffusion.steps",
    "variant": "denoiser.variant",
    "num_samples": "evaluate.n_samples",
    "compare_baselines": "evaluate.compare_baselines",
    "export_predictions": "evaluate.export_predictions",
    "denoiser_checkpoint": "evaluate.denoiser_checkpoint",
    "plot_nodes": "evaluate.plot_nodes",
    "max_windows": "evaluate.max_windows",
    "bench_nodes": "evaluate.bench_nodes",
    "trials": "evaluate.bench_trials",
}


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per workflow step."""
    parser = argparse.ArgumentParser(
        prog="ustd",
        description="Pre-trained spatio-temporal encoder with diffusion denoisers",
    )
    parser.add_argument("--config", default=CONFIG_FILE,
                        help="JSON run configuration (env USTD_CONFIG)")
    parser.add_argument("--seed", type=int, default=None,
                        help="Run seed (falls back to config, then USTD_SEED)")
    parser.add_argument("--output-dir", dest="output_dir", default=None,
                        help="Directory for checkpoints and reports")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="Write a synthetic dataset")
    synth.add_argument("--n-nodes", dest="n_nodes", type=int, default=None)
    synth.add_argument("--t-total", dest="t_total", type=int, default=None)
    synth.add_argument("--out", dest="synth_dir", default=None)

    for name, help_text in (
        ("pretrain", "Pre-train the encoder"),
        ("train", "Train a task denoiser"),
        ("evaluate", "Sample and score the test split"),
        ("bench", "Time the sampling pass of both denoiser families"),
    ):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--task", choices=TASKS, default=None)
        sub.add_argument("--signals", default=None)
        sub.add_argument("--adjacency", default=None)
        sub.add_argument("--diffusion-steps", dest="diffusion_steps", type=int,
                         default=None)

    pretrain = commands.choices["pretrain"]
    pretrain.add_argument("--mask-ratio", dest="mask_ratio", type=float, default=None)
    pretrain.add_argument("--graph-sample-rate", dest="graph_sample_rate", type=float,
                          default=None)
    pretrain.add_argument("--steps", dest="pretrain_steps", type=int, default=None)
    pretrain.add_argument("--no-masking", dest="masking", action="store_false",
                          default=None)
    pretrain.add_argument("--no-graph-sampling", dest="graph_sampling",
                          action="store_false", default=None)
    pretrain.add_argument("--resume", action="store_true")

    train = commands.choices["train"]
    train.add_argument("--encoder-checkpoint", dest="encoder_checkpoint", default=None)
    train.add_argument("--encoder-mode", dest="encoder_mode",
                       choices=("pretrained", "scratch", "none"), default=None)
    train.add_argument("--freeze-encoder", dest="freeze_encoder", action="store_true",
                       default=None)
    train.add_argument("--sign-flip", dest="sign_flip", action="store_true", default=None,
                       help="Flip spatial eigenvector signs at random per batch")
    train.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    train.add_argument("--variant", choices=("gated", "full"), default=None)

    evaluate = commands.choices["evaluate"]
    evaluate.add_argument("--num-samples", dest="num_samples", type=int, default=None)
    evaluate.add_argument("--compare-baselines", dest="compare_baselines",
                          action="store_true", default=None)
    evaluate.add_argument("--export-predictions", dest="export_predictions",
                          action="store_true", default=None)
    evaluate.add_argument("--denoiser-checkpoint", dest="denoiser_checkpoint",
                          default=None)
    evaluate.add_argument("--plot-nodes", dest="plot_nodes", type=int, nargs="*",
                          default=None)
    evaluate.add_argument("--max-windows", dest="max_windows", type=int, default=None)

    bench = commands.choices["bench"]
    bench.add_argument("--nodes", dest="bench_nodes", type=int, default=None)
    bench.add_argument("--trials", type=int, default=None)
    bench.add_argument("--gated-checkpoint", dest="gated_checkpoint", default=None,
                       help="Trained gated denoiser checkpoint to time")
    bench.add_argument("--full-checkpoint", dest="full_checkpoint", default=None,
                       help="Trained joint-attention denoiser checkpoint to time")
    return parser


class UstdCli:
    """
    Command-line driver.

    Loads and validates the configuration once, then dispatches to the
    command handler. Handlers raise UstdError subclasses; run() turns them
    into exit codes.
    """

    def __init__(self, args: argparse.Namespace):
        """
        Initialize the driver from parsed arguments.

        Args:
            args: Parsed command-line arguments
        """
        self.args = args
        self.config_manager = ConfigManager(args.config)

    def load_config(self) -> RunConfig:
        """Config file with the command's flags applied, validated and seeded."""
        config = self.config_manager.load_config()
        values = vars(self.args)
        overrides = {key: values[dest] for dest, key in OVERRIDES.items() if dest in values}
        ConfigManager.apply_overrides(config, overrides)
        ConfigManager.validate_config(config)
        config.seed = resolve_seed(self.args.seed, config)
        return config

    def run(self) -> int:
        """
        Execute the selected command.

        Returns:
            int: Process exit code
        """
        handlers = {
            "synth": self.cmd_synth,
            "pretrain": self.cmd_pretrain,
            "train": self.cmd_train,
            "evaluate": self.cmd_evaluate,
            "bench": self.cmd_bench,
        }
        try:
            config = self.load_config()
            handlers[self.args.command](config)
        except UstdError as e:
            logger.error(f"{self.args.command} failed: {e}")
            return e.exit_code
        except Exception as e:
            logger.error(f"Unexpected error in {self.args.command}: {e}")
            return 1
        return 0

    def cmd_synth(self, config: RunConfig) -> Dict[str, str]:
        """Write a synthetic graph and signals into synth.output_dir."""
        rng = seed_everything(config.seed)
        synth = config.synth
        graph, series = synthesize_graph_signal(synth.n_nodes, synth.t_total, rng,
                                                synth, config.graph)
        signals_path = os.path.join(synth.output_dir, "signals.ustd")
        adjacency_path = os.path.join(synth.output_dir, "adjacency.csv")
        try:
            save_signals(signals_path, series)
            save_graph(adjacency_path, graph)
        except OSError as e:
            raise ConfigError(f"Cannot write to {synth.output_dir}: {e}") from e
        logger.info(f"Wrote {signals_path} and {adjacency_path}")
        logger.info(json.dumps(series.metadata["generator"], indent=2))
        return {"signals": signals_path, "adjacency": adjacency_path}

    def cmd_pretrain(self, config: RunConfig) -> str:
        """Pre-train the encoder and write its checkpoint and loss curve."""
        rng = seed_everything(config.seed)
        data = prepare_data(config, rng)
        path = config.train.encoder_checkpoint or os.path.join(
            config.output_dir, ENCODER_CHECKPOINT)
        manager = PretrainManager(config, data, config.seed, path)
        if self.args.resume:
            manager.resume()
        run = manager.run(progress=True)
        loss_curve(run.losses, os.path.join(config.output_dir, "pretrain_loss.png"),
                   label="masked MAE")
        logger.info(f"Encoder checkpoint written to {path}")
        return path

    def cmd_train(self, config: RunConfig) -> str:
        """Train the task denoiser with encoder finetuning."""
        rng = seed_everything(config.seed)
        data = prepare_data(config, rng)
        run, _ = train_denoiser(config, data, config.seed, progress=True)
        loss_curve(run.losses,
                   os.path.join(config.output_dir, f"train_loss_{config.task}.png"),
                   val_losses=run.val_losses)
        logger.info(
            f"Denoiser checkpoint written to {run.checkpoint_paths[-1]} "
            f"({run.stopped_reason}, best validation loss {run.best_val_loss:.6g})"
        )
        return run.checkpoint_paths[-1]

    def cmd_evaluate(self, config: RunConfig) -> List[str]:
        """Sample the test split, score it and write reports and figures."""
        trained = load_trained(config)
        eval_config = copy.deepcopy(trained.config)
        eval_config.evaluate = config.evaluate
        eval_config.output_dir = config.output_dir
        eval_config.data.signals_path, eval_config.data.adjacency_path = \
            dataset_paths(config)
        eval_config.seed = config.seed

        rng = seed_everything(config.seed)
        data = prepare_data(eval_config, rng, partition=trained.partition,
                            normalizer=trained.normalizer)

        ev = config.evaluate
        sample_sets = infer(data, trained.encoder, trained.denoiser, trained.schedule,
                            ev.n_samples, config.seed, max_windows=ev.max_windows,
                            batch_size=eval_config.data.batch_size)
        reports = [evaluate_model(data, sample_sets, eval_config)]
        if ev.compare_baselines:
            baselines = baseline_sample_sets(data, ev.n_samples,
                                             np.random.default_rng(config.seed),
                                             max_windows=ev.max_windows)
            for name, sets in baselines.items():
                reports.append(evaluate_model(data, sets, eval_config, name))

        report_dir = os.path.join(config.output_dir, "report")
        paths = write_reports(reports, report_dir)
        if data.task == "forecast":
            paths.append(horizon_curve(reports, os.path.join(report_dir,
                                                             "horizon_mae.png")))
        paths += self._fan_charts(data, sample_sets, ev.plot_nodes, report_dir)
        if ev.export_predictions:
            paths.append(export_predictions(
                os.path.join(report_dir, f"predictions_{data.task}.ustd"),
                sample_sets, data))
        for path in paths:
            logger.info(f"Wrote {path}")
        return paths

    @staticmethod
    def _fan_charts(data: Any, sample_sets: Sequence[Any], nodes: Sequence[int],
                    directory: str) -> List[str]:
        pair = data.windows["test"][0]
        truth = data.truth(pair)
        history = None
        if data.task == "forecast":
            history = data.raw.values[:, pair.start:pair.start + pair.condition.shape[1]]
        paths = []
        for node in nodes:
            if not 0 <= node < truth.shape[0]:
                raise InputError(
                    f"Plot node {node} is outside the {truth.shape[0]} target nodes"
                )
            node_id = data.graph.node_ids[int(data.target_nodes[node])]
            paths.append(fan_chart(
                sample_sets[0], truth, node,
                os.path.join(directory, f"fan_{data.task}_node{node_id}.png"),
                history=history,
                title=f"{data.task} node {node_id}",
            ))
        return paths

    def bench_checkpoints(self, config: RunConfig) -> Dict[str, str]:
        """
        Trained denoisers to time, by bench name.

        Explicit flags win; otherwise the run's own denoiser checkpoint is used
        when it exists, under the name of its configured variant.
        """
        checkpoints = {}
        if self.args.gated_checkpoint:
            checkpoints["gated"] = self.args.gated_checkpoint
        if self.args.full_checkpoint:
            checkpoints["full_attention"] = self.args.full_checkpoint
        if checkpoints:
            return checkpoints
        default = config.evaluate.denoiser_checkpoint or os.path.join(
            config.output_dir, denoiser_checkpoint_name(config.task))
        if os.path.exists(default):
            name = "gated" if config.denoiser.variant == "gated" else "full_attention"
            return {name: default}
        logger.info("No trained denoiser checkpoint found; timing random weights")
        return {}

    def cmd_bench(self, config: RunConfig) -> str:
        """Time both denoiser families and write the timing report."""
        checkpoints = self.bench_checkpoints(config)
        results = benchmark_denoisers(config, seed=config.seed, checkpoints=checkpoints)
        gated, full = results
        speedup = full.mean_seconds / gated.mean_seconds
        lines = [f"task={config.task}", f"nodes={config.evaluate.bench_nodes}",
                 f"diffusion_steps={config.diffusion.steps}"]
        for name in ("gated", "full_attention"):
            lines.append(f"{name}_weights={checkpoints.get(name, 'random')}")
        for result in results:
            lines += [
                f"{result.name}_seconds_mean={result.mean_seconds:.6f}",
                f"{result.name}_seconds_std={result.std_seconds:.6f}",
                f"{result.name}_params={result.n_params}",
            ]
        lines.append(f"speedup={speedup:.3f}")
        os.makedirs(config.output_dir, exist_ok=True)
        path = os.path.join(config.output_dir, "bench.txt")
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")
        logger.info(f"Gated sampling is {speedup:.2f}× faster than joint attention")
        return path


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments and run the selected command.

    Args:
        argv: Arguments without the program name, sys.argv by default

    Returns:
        int: Exit code
    """
    args = build_parser().parse_args(argv)
    return UstdCli(args).run()
