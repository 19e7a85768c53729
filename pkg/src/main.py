from src.controllers.cli import cli


def main() -> None:
    """Run the command line with the process arguments."""
    cli(prog_name="foxecast-copula")


if __name__ == "__main__":
    main()
