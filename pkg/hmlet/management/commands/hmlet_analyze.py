from hmlet.analysis import analyze
from hmlet.management.base import HmletCommand
from hmlet.model import EMBEDDING_FINAL, EMBEDDING_RESIDUAL
from hmlet.numerics import ACTIVATIONS, LEAKY_RELU


class Command(HmletCommand):
    help = "Classify the nodes by their gate decisions and relate the classes to degree, centralities and neighbour similarity."

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', help="Checkpoint written by the train command.")
        parser.add_argument('--data', help="Directory of the prepared dataset the checkpoint was trained on.")
        parser.add_argument('--embedding', choices=[EMBEDDING_FINAL, EMBEDDING_RESIDUAL], default=EMBEDDING_FINAL,
                            help="Embedding compared between neighbours.")
        parser.add_argument('--activation', choices=ACTIVATIONS, default=None)
        parser.add_argument('--threads', type=int, default=1)
        parser.add_argument('--out', help="Write the JSON report to this file instead of stdout.")

    def handle(self, *args, **options):
        graph = self.read_graph(options)
        path, params, checkpoint_id = self.read_model(options, graph)
        activation = options['activation'] or self.run_config(path).get('activation', LEAKY_RELU)
        report = analyze(params, graph, activation, options['embedding'], workers=self.worker_count(options))

        table = self.stdout if options.get('out') else self.stderr
        table.write("layer   linear  non-linear")
        for row in report.gate_ratios:
            table.write(f"{row['layer']:>5} {row['linear']:7.2f}% {row['nonlinear']:9.2f}%")
        payload = report.as_dict(variant=str(params.variant), checkpoint_id=checkpoint_id, embedding=options['embedding'])
        self.emit(payload, options.get('out'))
