import argparse
import asyncio
import json
import sys
from pathlib import Path
from typing import List, Optional

from .config import logger
from .errors import FmmError
from .pipeline import Pipeline
from .runconfig import RunConfig, load_config
from .studies import STUDIES
from .utils import write_json_atomic
from .version import VERSION

STAGE_COMMANDS = ("simulate", "transform", "select", "fit", "infer", "diagnose")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semifmm",
        description="Bayesian semiparametric functional mixed models on surface data",
    )
    parser.add_argument("--version", action="version", version=f"semifmm {VERSION}")
    parser.add_argument("--config", help="JSON run config (defaults apply when omitted)")
    parser.add_argument("--output", help="output directory (overrides the config and SEMIFMM_OUTPUT_DIR)")
    parser.add_argument("--workers", type=int, help="worker processes for per-coefficient work")
    parser.add_argument("--strict", action="store_true", help="treat non-convergence warnings as errors (exit 4)")
    parser.add_argument("--force", action="store_true", help="rerun stages whose outputs are already current")

    commands = parser.add_subparsers(dest="command", required=True)
    simulate = commands.add_parser("simulate", help="write a pseudo-dataset")
    simulate.add_argument("--from-fit", action="store_true",
                          help="posterior-predictive functions from the current fit")
    commands.add_parser("transform", help="basis transform, spike filter, compression, weights")
    commands.add_parser("select", help="two-step model selection")
    fit = commands.add_parser("fit", help="REML starts, empirical Bayes and MCMC for every coefficient")
    fit.add_argument("--resume", action="store_true", help="reuse intact chain checkpoints from earlier runs")
    commands.add_parser("infer", help="data-space summaries, band CSVs and heatmaps")
    commands.add_parser("diagnose", help="Geweke, ESS and acceptance summaries")
    commands.add_parser("status", help="stage manifests and recent runs")
    commands.add_parser("serve", help="MCP stdio server")
    study = commands.add_parser("study", help="run one simulation study")
    study.add_argument("name", choices=sorted(STUDIES))
    study.add_argument("--replicates", type=int, default=20)
    return parser


def _config(args: argparse.Namespace) -> RunConfig:
    return load_config(args.config).with_overrides(output_dir=args.output, workers=args.workers)


async def _run_stage(pipeline: Pipeline, args: argparse.Namespace):
    if args.command == "simulate":
        return await pipeline.simulate(from_fit=True if args.from_fit else None)
    if args.command == "fit":
        return await pipeline.fit(resume=args.resume)
    return await getattr(pipeline, args.command)()


async def _run_study(config: RunConfig, name: str, replicates: int) -> dict:
    result = await asyncio.to_thread(STUDIES[name], replicates, seed=config.seed)
    path = Path(config.output_dir) / "studies" / f"{name}.json"
    write_json_atomic(path, result.to_dict())
    logger.info(f"📊 Study {name}: {json.dumps(result.summary, default=str)}")
    return {"path": str(path), "summary": result.summary, "seconds": result.seconds}


async def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one command, return the process exit code."""
    args = _build_parser().parse_args(argv)
    try:
        config = _config(args)
        if args.command == "serve":
            from .server import FmmServer

            await FmmServer(config, strict=args.strict).run()
            return 0
        if args.command == "study":
            payload = await _run_study(config, args.name, args.replicates)
        else:
            pipeline = Pipeline(config, strict=args.strict, force=args.force)
            if args.command == "status":
                payload = await pipeline.status()
            else:
                payload = (await _run_stage(pipeline, args)).to_dict()
        print(json.dumps(payload, indent=2, sort_keys=True, default=str))
        return 0
    except FmmError as e:
        code = f" [{e.code}]" if e.code else ""
        logger.error(f"❌ {type(e).__name__}{code}: {e}")
        return e.exit_code


def cli():
    """Console-script entrypoint."""
    try:
        sys.exit(asyncio.run(main()))
    except KeyboardInterrupt:
        logger.info("🛑 Stopped by user")
        sys.exit(130)


if __name__ == "__main__":
    cli()
