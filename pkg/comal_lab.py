#!/usr/bin/env python3
"""
comal-lab command line
Generate synthetic scenes, pretrain the flow and structure network, run
adaptation regimes and ablations, and write reports.
"""

import argparse
import logging
import signal
import sys
from pathlib import Path

import numpy as np
from rich.console import Console
from rich.panel import Panel
from rich.status import Status
from rich.table import Table
from rich import box

# Add the project root to Python path
sys.path.append(str(Path(__file__).parent))

from modules import ndgrad as nd
from modules.bimal import FlowModel, flow_grid, mean_nll, onehot, train_flow, uds_estimate
from modules.config import LabConfig, TAU_FORMS, load_config
from modules.costruct import StructNet, heldout_masked_nll, sample, sample_unconditional, train_struct
from modules.error_handler import ErrorHandler, setup_logging
from modules.evalcli import load_segnet_checkpoint, render, report
from modules.synthworld import generate_dataset, load_dataset, save_dataset, validate_structure
from modules.trainer import ablation_suite, flow_codes, run_experiment, struct_grids

logger = logging.getLogger("modules.cli")


class ComalLabCLI:
    """
    Command dispatcher: each subcommand loads configuration, sets up logging
    under its output directory and prints results with rich.
    """

    def __init__(self):
        self.console = Console()
        self.error_handler = ErrorHandler()
        signal.signal(signal.SIGINT, self.signal_handler)
        signal.signal(signal.SIGTERM, self.signal_handler)

    def signal_handler(self, signum, frame):
        """Handle interrupt signals gracefully"""
        self.console.print("\nInterrupted; partial outputs stay on disk.", style="yellow")
        sys.exit(130)

    def build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(prog="comal-lab", description="Self-supervised domain adaptation lab on synthetic street scenes")
        parser.add_argument("--verbose", action="store_true", help="log per-step losses")
        sub = parser.add_subparsers(dest="command", required=True)

        gen = sub.add_parser("gen", help="generate a synthetic dataset")
        gen.add_argument("--out", required=True, type=Path)
        gen.add_argument("--seed", type=int, default=0)
        gen.add_argument("--count", type=int, default=512)
        gen.add_argument("--domain", choices=["source", "target"], default="source")
        gen.add_argument("--lambda", dest="tail_lambda", type=float, default=None)
        gen.add_argument("--config", type=Path, default=None)

        flow = sub.add_parser("train-flow", help="fit the flow to source ground truths")
        flow.add_argument("--data", required=True, type=Path, help="source dataset directory")
        flow.add_argument("--out", required=True, type=Path, help="flow checkpoint file")
        flow.add_argument("--config", type=Path, default=None)
        flow.add_argument("--seed", type=int, default=None)
        flow.add_argument("--epochs", type=int, default=None)
        flow.add_argument("--lr", type=float, default=None)
        self._add_tau_flags(flow)

        struct = sub.add_parser("train-struct", help="fit the structure network to source ground truths")
        struct.add_argument("--data", required=True, type=Path)
        struct.add_argument("--out", required=True, type=Path)
        struct.add_argument("--config", type=Path, default=None)
        struct.add_argument("--seed", type=int, default=None)
        struct.add_argument("--epochs", type=int, default=None)
        struct.add_argument("--lr", type=float, default=None)

        run = sub.add_parser("run", help="pretrain, warm up and adapt under one regime")
        run.add_argument("--config", type=Path, default=None)
        run.add_argument("--regime", choices=["source-only", "entmin", "bimal", "comal"], default=None)
        run.add_argument("--out", required=True, type=Path)
        run.add_argument("--seed", type=int, default=None)

        ablation = sub.add_parser("ablation", help="run all five ablation settings")
        ablation.add_argument("--config", type=Path, default=None)
        ablation.add_argument("--out", required=True, type=Path)
        ablation.add_argument("--seed", type=int, default=None)

        rep = sub.add_parser("report", help="consolidate a run directory")
        rep.add_argument("run_dir", type=Path)
        rep.add_argument("--samples", type=int, default=4)

        smp = sub.add_parser("sample", help="sample label maps from a structure network")
        smp.add_argument("--struct", required=True, type=Path, help="structure network checkpoint")
        smp.add_argument("--mask-file", type=Path, default=None, help="NDG1 mask, 1 = unknown")
        smp.add_argument("--known-file", type=Path, default=None, help="NDG1 label map for known pixels")
        smp.add_argument("--temp", type=float, default=1.0)
        smp.add_argument("--seed", type=int, default=0)
        smp.add_argument("--count", type=int, default=1)
        smp.add_argument("--out", required=True, type=Path, help="output .ppm (index appended when count > 1)")

        uds = sub.add_parser("uds", help="estimate the unaligned domain score of predictions")
        uds.add_argument("--flow", required=True, type=Path)
        uds.add_argument("--data", required=True, type=Path, help="dataset directory (target images)")
        uds.add_argument("--segnet", type=Path, default=None, help="segmenter checkpoint; ground truths when omitted")
        uds.add_argument("--config", type=Path, default=None)
        self._add_tau_flags(uds)
        return parser

    @staticmethod
    def _add_tau_flags(parser: argparse.ArgumentParser):
        parser.add_argument("--sigma1", type=float, default=None)
        parser.add_argument("--sigma2", type=float, default=None)
        parser.add_argument("--tau-form", choices=TAU_FORMS, default=None)

    def load_config(self, args, **extra) -> LabConfig:
        overrides = {k: v for k, v in extra.items() if v is not None}
        for flag in ("seed", "sigma1", "sigma2", "tau_form", "regime"):
            value = getattr(args, flag, None)
            if value is not None:
                overrides[flag] = value
        return load_config(getattr(args, "config", None), **overrides)

    def start_logging(self, log_dir: Path, verbose: bool):
        setup_logging(log_dir / "logs" / "comal_lab.log", logging.DEBUG if verbose else logging.INFO)
        self.error_handler = ErrorHandler(log_dir)

    # commands

    def cmd_gen(self, args):
        cfg = self.load_config(args, tail_lambda=args.tail_lambda)
        self.start_logging(args.out, args.verbose)
        seeds = [args.seed * 1_000_000 + i for i in range(args.count)]
        with Status(f"Generating {args.count} {args.domain} scenes...", console=self.console):
            samples = generate_dataset(seeds, args.domain, cfg.world, cfg.train.workers)
            save_dataset(args.out, samples, cfg.world)
        broken = sum(1 for s in samples if validate_structure(s.labels))
        self.console.print(f"Wrote {len(samples)} scenes to {args.out} ({broken} with structure violations)", style="bold green")

    def cmd_train_flow(self, args):
        cfg = self.load_config(args, flow_epochs=args.epochs, flow_lr=args.lr)
        self.start_logging(args.out.parent, args.verbose)
        nd.set_default_dtype(cfg.train.dtype)
        samples = load_dataset(args.data)
        labels = np.stack([s.labels for s in samples])
        codes = flow_codes(labels, cfg)
        holdout = max(1, len(codes) // 8) if len(codes) > 1 else 0
        train_part, held = codes[holdout:], codes[:holdout]
        with Status("Training flow...", console=self.console):
            model = train_flow(train_part, cfg.flow, seed=cfg.train.seed)
        model.save(args.out)

        table = Table(title="Flow", box=box.SIMPLE)
        table.add_column("metric")
        table.add_column("value", justify="right")
        table.add_row("dimension", str(model.dim))
        table.add_row("final train nll", f"{model.history[-1]:.3f}" if model.history else "-")
        if holdout:
            table.add_row("held-out nll", f"{mean_nll(model, held):.3f}")
            stride = cfg.flow.grid_stride
            pairs = [(s.image[::stride, ::stride], onehot(s.labels[::stride, ::stride])) for s in samples[:holdout]]
            table.add_row(f"held-out UDS ({cfg.loss.tau_form})", f"{uds_estimate(model, pairs, cfg.loss.sigma1, cfg.loss.sigma2, cfg.loss.tau_form, cfg.flow.smoothing):.3f}")
        self.console.print(table)
        self.console.print(f"Saved flow to {args.out}", style="bold green")

    def cmd_train_struct(self, args):
        cfg = self.load_config(args, struct_epochs=args.epochs, struct_lr=args.lr)
        self.start_logging(args.out.parent, args.verbose)
        nd.set_default_dtype(cfg.train.dtype)
        grids = struct_grids(np.stack([s.labels for s in load_dataset(args.data)]), cfg)
        holdout = max(1, len(grids) // 8) if len(grids) > 1 else 0
        with Status("Training structure network...", console=self.console):
            net = train_struct(grids[holdout:], cfg.struct, seed=cfg.train.seed)
        net.save(args.out)
        if holdout:
            self.console.print(f"Held-out masked nll: {heldout_masked_nll(net, grids[:holdout], cfg.train.seed):.4f}")
        self.console.print(f"Saved structure network to {args.out}", style="bold green")

    def cmd_run(self, args):
        cfg = self.load_config(args)
        self.start_logging(args.out, args.verbose)
        result = run_experiment(cfg, args.out)
        final = result.final
        self.console.print(Panel(
            f"regime: {cfg.train.regime}\nmIoU: {final['miou']:.4f}\nhead IoU: {final['head_iou']:.4f}\ntail IoU: {final['tail_iou']:.4f}",
            title="Run finished", border_style="green"))

    def cmd_ablation(self, args):
        cfg = self.load_config(args)
        self.start_logging(args.out, args.verbose)
        rows = ablation_suite(cfg, args.out)
        table = Table(title="Ablation (target eval split)", box=box.ROUNDED)
        for column in ("setting", "mIoU", "head IoU", "tail IoU"):
            table.add_column(column, justify="left" if column == "setting" else "right")
        for row in rows:
            table.add_row(row["setting"], f"{100 * row['miou']:.1f}", f"{100 * row['head_iou']:.1f}", f"{100 * row['tail_iou']:.1f}")
        self.console.print(table)

    def cmd_report(self, args):
        self.start_logging(args.run_dir, args.verbose)
        written = report(args.run_dir, args.samples)
        for path in written:
            self.console.print(f"  {path}")
        self.console.print("Report written", style="bold green")

    def cmd_sample(self, args):
        self.start_logging(args.out.parent, args.verbose)
        net = StructNet.load(args.struct)
        if args.mask_file is None:
            maps = sample_unconditional(net, args.count, args.temp, args.seed)
        else:
            mask = nd.load_tensor(args.mask_file).astype(np.int64)
            known = nd.load_tensor(args.known_file).astype(np.int64) if args.known_file else np.zeros_like(mask)
            maps = np.stack([sample(net, mask, known, args.temp, args.seed + i) for i in range(args.count)])

        args.out.parent.mkdir(parents=True, exist_ok=True)
        for i, labels in enumerate(maps):
            path = args.out if len(maps) == 1 else args.out.with_name(f"{args.out.stem}_{i:03d}{args.out.suffix}")
            path.write_bytes(render(labels))
            violations = validate_structure(labels)
            self.console.print(f"{path}: {len(violations)} structure violations")

    def cmd_uds(self, args):
        cfg = self.load_config(args)
        self.start_logging(args.flow.parent, args.verbose)
        flow = FlowModel.load(args.flow)
        samples = load_dataset(args.data)
        images = np.stack([s.image for s in samples])
        if args.segnet is not None:
            net = load_segnet_checkpoint(args.segnet)
            with nd.no_grad():
                probs = np.concatenate([net.forward(images[i:i + 16])[0].data for i in range(0, len(images), 16)])
        else:
            probs = onehot(np.stack([s.labels for s in samples]))
        grid_images, grid_probs = flow_grid(images, probs, cfg.flow.grid_stride)
        score = uds_estimate(flow, list(zip(grid_images, grid_probs.data)), cfg.loss.sigma1, cfg.loss.sigma2,
                             cfg.loss.tau_form, cfg.flow.smoothing)
        self.console.print(Panel(f"UDS estimate: {score:.3f}\n(tau form {cfg.loss.tau_form}, sigma1 {cfg.loss.sigma1}, sigma2 {cfg.loss.sigma2})",
                                 title="Unaligned domain score", border_style="cyan"))

    def run(self, argv=None) -> int:
        args = self.build_parser().parse_args(argv)
        handler = getattr(self, "cmd_" + args.command.replace("-", "_"))
        try:
            handler(args)
            return 0
        except Exception as e:
            result = self.error_handler.handle_error(e, context=args.command)
            self.console.print(f"❌ {result['user_message']}", style="bold red")
            self.console.print(f"   {result['technical_details']}", style="dim")
            return 1


def main():
    """Main entry point"""
    try:
        sys.exit(ComalLabCLI().run())
    except SystemExit:
        raise
    except Exception as e:
        console = Console()
        console.print(f"❌ Fatal error: {str(e)}", style="bold red")
        sys.exit(1)


if __name__ == "__main__":
    main()
