#!/usr/bin/env python3
"""
Bootstrap for the gvlm toolkit: virtual environment, dependencies, .env and runs directory.

Usage: python setup.py [--venv NAME] [--skip-install]
"""

import argparse
import os
import platform
import shutil
import subprocess
import sys
from pathlib import Path

MIN_PYTHON = (3, 9)
STACK = ("torch", "numpy", "pydantic", "pandas", "plyfile", "dotenv", "nltk", "rouge_score", "pytest")


def print_banner():
    print("""
    ╔══════════════════════════════════════════════════════╗
    ║          🧊 Gaussian Scene Sparsifier (gvlm)         ║
    ║                 Environment Setup                    ║
    ╚══════════════════════════════════════════════════════╝
    """)


def check_python_version():
    """Stop early on interpreters older than MIN_PYTHON."""
    current = sys.version_info[:3]
    if current[:2] < MIN_PYTHON:
        print(f"❌ Python {MIN_PYTHON[0]}.{MIN_PYTHON[1]}+ is required, found {'.'.join(map(str, current))}")
        sys.exit(1)
    print(f"✅ Python {'.'.join(map(str, current))} detected")


def venv_tool(venv: Path, tool: str) -> Path:
    """Path of an executable inside the virtual environment."""
    if platform.system().lower() == "windows":
        return venv / "Scripts" / f"{tool}.exe"
    return venv / "bin" / tool


def activation_command(venv: Path) -> str:
    if platform.system().lower() == "windows":
        return f"{venv}\\Scripts\\activate"
    return f"source {venv}/bin/activate"


def create_virtual_environment(venv: Path) -> Path:
    if venv.exists():
        print(f"📁 Reusing virtual environment '{venv}'")
        return venv

    print(f"🔧 Creating virtual environment '{venv}'...")
    try:
        subprocess.run([sys.executable, "-m", "venv", str(venv)], check=True)
    except subprocess.CalledProcessError as e:
        print(f"❌ Could not create '{venv}': {e}")
        sys.exit(1)
    print(f"✅ Virtual environment '{venv}' ready")
    return venv


def install_dependencies(venv: Path):
    """pip-install requirements.txt into the environment (torch is the slow one)."""
    python = str(venv_tool(venv, "python"))
    print("📦 Installing requirements.txt (PyTorch can take a few minutes)...")
    try:
        subprocess.run([python, "-m", "pip", "install", "--upgrade", "pip"], check=True)
        subprocess.run([python, "-m", "pip", "install", "-r", "requirements.txt"], check=True)
    except subprocess.CalledProcessError as e:
        print(f"❌ Installation failed: {e}")
        print("Retry by hand with:")
        print(f"  {activation_command(venv)}")
        print("  pip install -r requirements.txt")
        sys.exit(1)
    print("✅ Requirements installed")


def verify_stack(venv: Path) -> bool:
    """Import every package of the stack inside the environment and report torch's version."""
    probe = f"import {', '.join(STACK)}; print(torch.__version__)"
    result = subprocess.run([str(venv_tool(venv, "python")), "-c", probe], capture_output=True, text=True)
    if result.returncode != 0:
        print(f"⚠️  Import check failed:\n{result.stderr.strip()}")
        return False
    print(f"✅ Stack importable (torch {result.stdout.strip()})")
    return True


def setup_environment_file():
    """Seed .env from .env.example; an existing .env is left alone."""
    env_file, example = Path(".env"), Path(".env.example")
    if env_file.exists():
        print("📝 Keeping existing .env")
    elif example.exists():
        shutil.copyfile(example, env_file)
        print("📝 Created .env from .env.example")
    else:
        print("⚠️  .env.example not found; GVLM_* defaults apply")


def create_runs_directory() -> Path:
    runs = Path(os.getenv("GVLM_RUNS_DIR", "runs"))
    runs.mkdir(parents=True, exist_ok=True)
    print(f"📁 Run outputs go to {runs}/<command>")
    return runs


def print_next_steps(venv: Path, runs: Path):
    print(f"""
    ╔══════════════════════════════════════════════════════╗
    ║                   🎉 Setup Complete!                 ║
    ╚══════════════════════════════════════════════════════╝

    📋 Next Steps:

    1️⃣  Activate the environment:
        {activation_command(venv)}

    2️⃣  Synthesize desk scenes and their annotations:
        python gvlm.py synth --spec specs/desk_series.json --out {runs}/synth

    3️⃣  Build counting questions and train the instruct stage:
        python gvlm.py benchgen --annotations {runs}/synth --out {runs}/bench
        python gvlm.py train --config specs/tiny_config.json --scenes {runs}/synth \\
            --qa {runs}/bench/count_qa.jsonl --out {runs}/train

    4️⃣  Run the fast test suite (add -m slow for the training runs):
        pytest

    💡 README.md lists every command, flag and config key.
    """)


def main(argv=None):
    parser = argparse.ArgumentParser(description="Prepare a gvlm development environment")
    parser.add_argument("--venv", default="gvlm_env", help="virtual environment directory")
    parser.add_argument("--skip-install", action="store_true", help="do not run pip")
    args = parser.parse_args(argv)

    print_banner()
    check_python_version()
    venv = create_virtual_environment(Path(args.venv))
    if not args.skip_install:
        install_dependencies(venv)
        verify_stack(venv)
    setup_environment_file()
    runs = create_runs_directory()
    print_next_steps(venv, runs)


if __name__ == "__main__":
    try:
        main()
    except KeyboardInterrupt:
        print("\n\n❌ Setup interrupted")
        sys.exit(1)
    except Exception as e:
        print(f"\n\n❌ Setup failed: {e}")
        sys.exit(1)
