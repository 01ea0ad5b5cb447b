#include <CLI11.hpp>

#include <iostream>

#include "stnat/commands.hpp"

using namespace stnat;

int main(int argc, char** argv) {
  CLI::App app{"spike-triggered non-autoregressive transformer toolkit"};
  app.require_subcommand(1);

  cmd::SynthOptions synth;
  auto* s_synth = app.add_subcommand(
      "synth", "generate a synthetic corpus with boundary ground truth");
  s_synth->add_option("--out", synth.out_dir, "output directory")->required();
  s_synth->add_option("--n", synth.n_train, "training utterances");
  s_synth->add_option("--n-dev", synth.n_dev, "dev utterances");
  s_synth->add_option("--vocab", synth.vocab_chars, "content characters");
  s_synth->add_option("--seed", synth.seed, "random seed");

  cmd::TrainOptions train;
  auto* s_train = app.add_subcommand("train", "train a model");
  s_train->add_option("--config", train.config_path, "config file")->required();
  s_train->add_option("--train-manifest", train.train_manifest, "training TSV")
      ->required();
  s_train->add_option("--dev-manifest", train.dev_manifest,
                      "dev TSV for per-epoch scoring");
  s_train->add_option("--vocab", train.vocab_path,
                      "vocab file (default: next to the train manifest)");
  s_train->add_option("--out", train.out_dir, "output directory")->required();
  s_train->add_option("--seed", train.seed, "random seed");
  s_train->add_flag("--force", train.force, "overwrite an existing out dir");

  cmd::DecodeCmdOptions decode;
  auto* s_decode = app.add_subcommand("decode", "decode a manifest");
  s_decode->add_option("--ckpt", decode.ckpt, "model checkpoint")->required();
  s_decode->add_option("--manifest", decode.manifest, "utterances")->required();
  s_decode->add_option("--vocab", decode.vocab_path, "vocab file");
  s_decode->add_option("--out", decode.out_dir, "output directory")->required();
  auto* lm_opt = s_decode->add_option("--lm", decode.lm_path,
                                      "language-model checkpoint for fusion");
  auto* lambda_opt =
      s_decode->add_option("--lambda", decode.lambda, "LM weight");
  auto* beam_opt = s_decode->add_option("--beam", decode.beam, "beam width");
  s_decode->add_flag("--rtf", decode.rtf,
                     "sequential decoding with a timing ledger");
  s_decode->add_option("--threads", decode.threads,
                       "parallel decode workers (ignored with --rtf)");

  cmd::EvalOptions eval;
  auto* s_eval = app.add_subcommand("eval", "score hypotheses against refs");
  s_eval->add_option("--hyp", eval.hyp_path, "hypothesis TSV")->required();
  s_eval->add_option("--ref", eval.ref_path, "reference manifest or TSV")
      ->required();
  s_eval->add_option("--vocab", eval.vocab_path, "vocab file");
  s_eval->add_option("--out", eval.out_path, "also write the report here");

  cmd::AnalyzeOptions analyze;
  auto* s_analyze = app.add_subcommand(
      "analyze", "length histogram, spike/boundary report, attention export");
  s_analyze->add_option("--ckpt", analyze.ckpt, "model checkpoint")->required();
  s_analyze->add_option("--manifest", analyze.manifest, "utterances")
      ->required();
  s_analyze->add_option("--vocab", analyze.vocab_path, "vocab file");
  s_analyze->add_option("--boundaries", analyze.boundaries_path,
                        "boundary sidecar (default: next to the manifest)");
  s_analyze->add_option("--out", analyze.out_dir, "output directory")
      ->required();
  s_analyze->add_option("--utt", analyze.utt_id,
                        "utterance for the attention export (default: first)");
  s_analyze->add_option("--layer", analyze.layer, "decoder layer to export");
  s_analyze->add_option("--head", analyze.head, "attention head to export");

  cmd::BenchOptions bench;
  auto* s_bench = app.add_subcommand(
      "bench", "trigger-threshold sweep: T' stats, CER, RTF per threshold");
  s_bench->add_option("--ckpt", bench.ckpt, "model checkpoint")->required();
  s_bench->add_option("--manifest", bench.manifest, "utterances")->required();
  s_bench->add_option("--vocab", bench.vocab_path, "vocab file");
  s_bench->add_option("--out", bench.out_path, "also write the table here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (s_synth->parsed()) return cmd::cmd_synth(synth);
    if (s_train->parsed()) return cmd::cmd_train(train);
    if (s_decode->parsed()) {
      decode.use_beam = lm_opt->count() > 0 || lambda_opt->count() > 0 ||
                        beam_opt->count() > 0;
      return cmd::cmd_decode(decode);
    }
    if (s_eval->parsed()) return cmd::cmd_eval(eval);
    if (s_analyze->parsed()) return cmd::cmd_analyze(analyze);
    if (s_bench->parsed()) return cmd::cmd_bench(bench);
  } catch (const std::exception& e) {
    std::cerr << "stnat: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
