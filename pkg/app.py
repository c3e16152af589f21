import sys
import click
from dotenv import load_dotenv
from loguru import logger
from cli.commands import evaluate_command, localize_command, synth_command, train_command

# Load environment variables
load_dotenv()


def configure_logging(verbose: bool, log_file: str = "logs/app.log") -> None:
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else "WARNING")
    logger.add(log_file, rotation="10 MB", level="INFO")


@click.group()
@click.option("--verbose", is_flag=True, default=False, help="Log debug output to stderr")
@click.option("--log-file", default="logs/app.log", envvar="CAMAL_LOG_FILE", help="Rotating log file")
def cli(verbose: bool, log_file: str):
    """Weakly supervised appliance detection and localization from smart-meter data."""
    configure_logging(verbose, log_file)


cli.add_command(synth_command)
cli.add_command(train_command)
cli.add_command(localize_command)
cli.add_command(evaluate_command)

# Run the application
if __name__ == "__main__":
    cli()
