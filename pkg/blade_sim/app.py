#!/usr/bin/env python3
"""
blade-sim tool service
FastAPI front end over the simulator operations
"""

import logging
from contextlib import asynccontextmanager
from datetime import datetime

from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .blade_config import VERSION, Settings
from .blade_logging import setup_logging
from .blade_operations import SimulationOperations
from .blade_schemas import (
    StatusResponse,
    ToolExecutionRequest,
    ToolExecutionResponse,
    ToolInfo,
    ToolsListResponse,
)

# Load settings
settings = Settings()

# Configure logging
setup_logging(settings.log_level, settings.log_json)
logger = logging.getLogger(__name__)

# Initialize simulator operations
sim_ops = SimulationOperations(settings)

TOOLS = [
    ToolInfo(name="run", description="Run one seeded simulation and return its metrics"),
    ToolInfo(name="sweep", description="Sweep one axis (epsilon, theta, lazy_fraction, "
                                       "snr_db, K) over independent seeds"),
    ToolInfo(name="pn_roc", description="Watermark detection and false-alarm rates over "
                                        "SNR and threshold grids"),
    ToolInfo(name="chain_audit", description="Load a chain dump and check every block"),
    ToolInfo(name="compute_budget", description="Block time, training time and the round "
                                                "count a time budget allows"),
]


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Manage application lifecycle"""
    logger.info(f"Starting blade-sim service v{VERSION}")
    logger.info(f"Sweep workers: {settings.threads}, output dir: {settings.output_dir}")
    yield
    logger.info("Shutting down blade-sim service")


# Create FastAPI app
app = FastAPI(
    title="blade-sim",
    description="Blockchain-assisted decentralized federated learning simulator",
    version=VERSION,
    lifespan=lifespan
)

# Configure CORS
app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.allowed_origins,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.get("/api/status", response_model=StatusResponse)
async def get_status():
    """Service status"""
    return StatusResponse(
        status="online",
        timestamp=datetime.utcnow(),
        version=VERSION,
        threads=settings.threads,
        output_dir=settings.output_dir,
    )


@app.get("/api/tools", response_model=ToolsListResponse)
async def list_tools():
    """List all available simulator tools"""
    return ToolsListResponse(
        tools=TOOLS,
        count=len(TOOLS),
        timestamp=datetime.utcnow().isoformat()
    )


@app.post("/api/tools/{tool_name}", response_model=ToolExecutionResponse)
async def execute_tool(tool_name: str, request: ToolExecutionRequest):
    """Execute a simulator tool and return results"""
    try:
        tool_mapping = {
            "run": sim_ops.run_simulation,
            "sweep": sim_ops.run_sweep,
            "pn_roc": sim_ops.watermark_roc,
            "chain_audit": sim_ops.chain_audit,
            "compute_budget": sim_ops.round_budget,
        }

        if tool_name not in tool_mapping:
            raise HTTPException(
                status_code=404,
                detail=f"Unknown tool: {tool_name}. Available tools: {list(tool_mapping.keys())}"
            )

        logger.info(f"Executing tool: {tool_name} with args: {request.arguments}")
        result = await tool_mapping[tool_name](**request.arguments)

        return ToolExecutionResponse(
            success=bool(result.get("success")),
            content=result,
            error=result.get("error"),
            code=result.get("code"),
            tool=tool_name,
            timestamp=datetime.utcnow()
        )

    except HTTPException:
        raise
    except Exception as e:
        logger.error(f"Tool execution failed for {tool_name}: {str(e)}")
        return ToolExecutionResponse(
            success=False,
            error=str(e),
            tool=tool_name,
            timestamp=datetime.utcnow()
        )


@app.get("/health")
async def health_check():
    """Health check endpoint"""
    return JSONResponse(
        content={
            "status": "healthy",
            "version": VERSION,
            "timestamp": datetime.utcnow().isoformat()
        }
    )


# Error handlers
@app.exception_handler(404)
async def not_found_handler(request: Request, exc: HTTPException):
    return JSONResponse(
        status_code=404,
        content={
            "error": getattr(exc, "detail", None) or "Endpoint not found",
            "status": 404,
            "timestamp": datetime.utcnow().isoformat()
        }
    )


@app.exception_handler(500)
async def internal_error_handler(request: Request, exc: Exception):
    logger.error(f"Internal server error: {str(exc)}")
    return JSONResponse(
        status_code=500,
        content={
            "error": "Internal server error",
            "status": 500,
            "timestamp": datetime.utcnow().isoformat()
        }
    )


def serve(host: str = "0.0.0.0", port: int = None) -> None:
    import uvicorn

    port = port or settings.port
    print("=" * 60)
    print(f"blade-sim service v{VERSION}")
    print("=" * 60)
    print(f"Starting server on port {port}")
    print(f"Debug mode: {settings.debug}")
    print(f"API Documentation: http://localhost:{port}/docs")
    print("-" * 60)

    uvicorn.run(
        "blade_sim.app:app",
        host=host,
        port=port,
        reload=settings.debug
    )


# Main entry point for local development
if __name__ == "__main__":
    serve()
