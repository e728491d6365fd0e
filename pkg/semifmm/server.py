"""
MCP stdio server exposing the pipeline stages as tools and the run registry as resources.
"""
import json
from dataclasses import replace
from typing import Any, Dict, List

from mcp.server import Server
from mcp.server.stdio import stdio_server
from mcp.types import Resource, TextContent, Tool

from .config import logger
from .errors import FmmError
from .pipeline import Pipeline
from .runconfig import RunConfig
from .version import VERSION

RUNS_URI = "file://semifmm/runs"

_OPTIONS = {
    "force": {"type": "boolean", "description": "Rerun even when outputs are current", "default": False},
    "strict": {"type": "boolean", "description": "Treat non-convergence as an error", "default": False},
}

TOOLS = {
    "fmm_simulate": ("Write a pseudo-dataset (or posterior-predictive functions with from_fit).",
                     {"from_fit": {"type": "boolean", "default": False}}),
    "fmm_transform": ("Wavelet transform, spike filter, compression and energy weights.", {}),
    "fmm_select": ("Two-step model selection by weighted aBIC voting.", {}),
    "fmm_fit": ("REML starts, empirical Bayes and one MCMC chain per basis coefficient.",
                {"resume": {"type": "boolean", "default": False}}),
    "fmm_infer": ("Posterior surfaces, joint bands, AUC, DF maps and correlations.", {}),
    "fmm_diagnose": ("Geweke, ESS and acceptance summaries of the fit.", {}),
    "fmm_status": ("Stage manifests and recent runs of the output directory.", {}),
}


def _text(payload: Any) -> List[TextContent]:
    return [TextContent(type="text", text=json.dumps(payload, indent=2, sort_keys=True, default=str))]


class FmmServer:
    def __init__(self, config: RunConfig, *, strict: bool = False):
        self.server = Server("semifmm")
        self.config = config
        self.strict = strict
        self.setup_handlers()
        logger.info(f"🚀 semifmm V{VERSION} server initialized (output {config.output_dir})")

    def pipeline(self, args: Dict[str, Any]) -> Pipeline:
        config = self.config
        if args.get("output_dir"):
            config = replace(config, output_dir=str(args["output_dir"]))
        return Pipeline(config, strict=bool(args.get("strict", self.strict)), force=bool(args.get("force", False)))

    def setup_handlers(self):
        """Set up MCP request handlers"""

        @self.server.list_tools()
        async def list_tools() -> List[Tool]:
            return [
                Tool(
                    name=name,
                    description=description,
                    inputSchema={
                        "type": "object",
                        "properties": {
                            "output_dir": {"type": "string", "description": "Output directory override"},
                            **_OPTIONS,
                            **extra,
                        },
                    },
                )
                for name, (description, extra) in TOOLS.items()
            ]

        @self.server.call_tool()
        async def call_tool(name: str, arguments: dict) -> List[TextContent]:
            logger.info(f"🎯 Tool call: {name} {arguments}")
            try:
                return await self.handle_tool(name, arguments or {})
            except FmmError as e:
                logger.error(f"❌ {name} failed: {e}")
                return _text({"error": type(e).__name__, "code": e.code, "message": str(e), "exit_code": e.exit_code})
            except Exception as e:
                logger.error(f"💥 Tool call error for {name}: {e}")
                return [TextContent(type="text", text=f"ERROR: Tool {name} failed: {e}")]

        @self.server.list_resources()
        async def list_resources() -> List[Resource]:
            return await self.list_resources()

        @self.server.read_resource()
        async def read_resource(uri) -> str:
            logger.info(f"📖 Reading resource: {uri}")
            return json.dumps(await self.read_resource(str(uri)), indent=2, sort_keys=True, default=str)

    async def handle_tool(self, name: str, args: Dict[str, Any]) -> List[TextContent]:
        if name not in TOOLS:
            raise ValueError(f"Unknown tool: {name}")
        pipeline = self.pipeline(args)
        if name == "fmm_status":
            return _text(await pipeline.status())
        if name == "fmm_simulate":
            result = await pipeline.simulate(from_fit=True if args.get("from_fit") else None)
        elif name == "fmm_fit":
            result = await pipeline.fit(resume=bool(args.get("resume", False)))
        else:
            result = await getattr(pipeline, name[len("fmm_"):])()
        return _text(result.to_dict())

    async def list_resources(self) -> List[Resource]:
        store = self.pipeline({}).store
        await store.initialize()
        resources = [Resource(uri=RUNS_URI, name="runs", description="Recorded stage runs (latest 50)",
                              mimeType="application/json")]
        for run in await store.list_runs(limit=50):
            resources.append(Resource(
                uri=f"{RUNS_URI}/{run['id']}",
                name=f"{run['stage']}-{run['id']}",
                description=f"{run['stage']} run ({run['status']}, started {run['started_at']})",
                mimeType="application/json",
            ))
        return resources

    async def read_resource(self, uri: str) -> Dict[str, Any]:
        store = self.pipeline({}).store
        await store.initialize()
        if uri == RUNS_URI:
            return {"runs": await store.list_runs(limit=50)}
        prefix = f"{RUNS_URI}/"
        if not uri.startswith(prefix):
            raise ValueError(f"Unknown resource: {uri}")
        run = await store.get_run(uri[len(prefix):])
        if run is None:
            raise ValueError(f"Unknown run: {uri[len(prefix):]}")
        manifest_path = run.get("manifest_path")
        if manifest_path:
            try:
                with open(manifest_path, encoding="utf-8") as handle:
                    run["manifest"] = json.load(handle)
            except (OSError, json.JSONDecodeError) as e:
                logger.warning(f"⚠️ Manifest for run {run['id']} unreadable: {e}")
        return run

    async def run(self):
        logger.info(f"🚀 Starting semifmm V{VERSION} MCP server on stdio")
        await self.pipeline({}).store.initialize()
        async with stdio_server() as (read_stream, write_stream):
            logger.info("✅ semifmm server ACTIVE on stdio transport")
            await self.server.run(read_stream, write_stream, self.server.create_initialization_options())
