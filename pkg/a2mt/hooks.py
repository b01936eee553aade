app_name = "a2mt"
app_title = "A2MT"
app_publisher = "A2MT Benchmark Contributors"
app_description = "Desk-scale benchmark for active acquisition on multimodal temporal data"
app_license = "MIT"

# Commands
# --------
# subcommand name -> handler(args, settings) returning an exit status

commands = {
    "gen": "a2mt.cli.gen",
    "oracle": "a2mt.cli.oracle",
    "pretrain": "a2mt.cli.pretrain",
    "train": "a2mt.cli.train",
    "eval": "a2mt.cli.evaluate",
    "sweep": "a2mt.cli.sweep",
    "pattern": "a2mt.cli.pattern",
    "gradcheck": "a2mt.cli.gradcheck",
}
