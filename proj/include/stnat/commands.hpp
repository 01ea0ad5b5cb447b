#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "stnat/checkpoint.hpp"
#include "stnat/config.hpp"
#include "stnat/data.hpp"
#include "stnat/eval.hpp"
#include "stnat/infer.hpp"
#include "stnat/train.hpp"

namespace stnat::cmd {

namespace fsys = std::filesystem;

inline std::string sibling(const std::string& reference_file,
                           const std::string& name) {
  return (fsys::path(reference_file).parent_path() / name).string();
}

// Falls back to a vocab.txt next to the manifest when no explicit path is
// given.
inline Vocab resolve_vocab(const std::string& vocab_path,
                           const std::string& manifest_path) {
  return Vocab::load(vocab_path.empty() ? sibling(manifest_path, "vocab.txt")
                                        : vocab_path);
}

inline std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

// ---------------------------------------------------------------------------
// synth: write a deterministic synthetic corpus (features, manifests, vocab,
// boundary ground truth).
// ---------------------------------------------------------------------------

struct SynthOptions {
  std::string out_dir;
  std::size_t n_train = 128;
  std::size_t n_dev = 32;
  std::size_t vocab_chars = 20;
  std::uint64_t seed = 0;
};

inline int cmd_synth(const SynthOptions& opt) {
  if (opt.n_train == 0) throw UsageError("synth: --n must be positive");
  SynthParams params;
  params.n_utts = opt.n_train + opt.n_dev;
  params.vocab_chars = opt.vocab_chars;
  const auto corpus = synth_corpus(params, opt.seed);

  const fsys::path out(opt.out_dir);
  fsys::create_directories(out / "feats");
  corpus.vocab.save((out / "vocab.txt").string());

  const auto write_manifest = [&](const std::string& name, std::size_t lo,
                                  std::size_t hi) {
    std::ofstream m(out / name, std::ios::binary | std::ios::trunc);
    if (!m) throw IoError("cannot write manifest " + name);
    for (std::size_t i = lo; i < hi; ++i) {
      const auto& u = corpus.utterances[i];
      write_features(u.features, (out / "feats" / (u.id + ".fmat")).string());
      m << u.id << "\tfeats/" << u.id << ".fmat\t"
        << corpus.vocab.detokenize(u.transcript) << "\n";
    }
  };
  write_manifest("train.tsv", 0, opt.n_train);
  if (opt.n_dev > 0)
    write_manifest("dev.tsv", opt.n_train, opt.n_train + opt.n_dev);
  save_boundaries(corpus.utterances, (out / "boundaries.tsv").string());

  std::ostringstream run;
  run << "command = synth\nseed = " << opt.seed << "\nn_train = " << opt.n_train
      << "\nn_dev = " << opt.n_dev << "\nvocab_chars = " << opt.vocab_chars
      << "\n";
  write_text_file((out / "run.cfg").string(), run.str());
  std::cout << "synth: wrote " << params.n_utts << " utterances to "
            << opt.out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train: run the training loop, write per-step metrics, per-epoch
// checkpoints and dev scores, then the averaged checkpoint.
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::string config_path;
  std::string train_manifest;
  std::string dev_manifest;  // optional
  std::string vocab_path;    // optional, default sibling of train manifest
  std::string out_dir;
  std::uint64_t seed = 0;
  bool force = false;
};

struct DevScore {
  double cer = 0;
  double exact_fraction = 0;
  double miss_fraction = 0;
};

template <class Real>
DevScore score_dev(const ModelParams<Real>& model,
                   const std::vector<Utterance>& dev) {
  std::vector<std::pair<TokenSequence, TokenSequence>> pairs;
  std::vector<std::pair<std::size_t, std::size_t>> lens;
  for (const auto& u : dev) {
    Graph<Real> g;
    g.recording = false;
    RunCtx<Real> ctx{g};
    const auto fwd = forward_st_nat(ctx, model, u.features);
    pairs.emplace_back(greedy_from_rows(fwd.dec_logp,
                                        reserved_eos_id(model.cfg.vocab_size),
                                        reserved_pad_id(model.cfg.vocab_size)),
                       u.transcript);
    lens.emplace_back(u.transcript.size(), fwd.trig.size());
  }
  const auto c = corpus_cer(pairs);
  const auto h = length_histogram(lens);
  return DevScore{c.rate,
                  h.total ? static_cast<double>(h.exact) / h.total : 0.0,
                  h.miss_fraction};
}

inline int cmd_train(const TrainOptions& opt) {
  const fsys::path out(opt.out_dir);
  if (fsys::exists(out) && !opt.force)
    throw UsageError("train: output directory '" + opt.out_dir +
                     "' exists; pass --force to overwrite");
  auto [mcfg, tcfg] = parse_run_config(read_text_file(opt.config_path));
  const Vocab vocab = resolve_vocab(opt.vocab_path, opt.train_manifest);
  if (mcfg.vocab_size != 0 && mcfg.vocab_size != vocab.size())
    throw FormatError("train: config vocab_size " +
                      std::to_string(mcfg.vocab_size) +
                      " does not match vocabulary of " +
                      std::to_string(vocab.size()));
  mcfg.vocab_size = vocab.size();
  mcfg.validate();
  tcfg.validate();

  const auto train_utts = load_manifest(opt.train_manifest, vocab);
  std::vector<Utterance> dev_utts;
  if (!opt.dev_manifest.empty())
    dev_utts = load_manifest(opt.dev_manifest, vocab);

  fsys::create_directories(out / "checkpoints");
  write_text_file((out / "run.cfg").string(),
                  serialize_model_config(mcfg) + serialize_train_config(tcfg) +
                      "seed = " + std::to_string(opt.seed) + "\n");

  std::ofstream metrics(out / "metrics.tsv", std::ios::trunc);
  metrics << "step\tlr\tloss\tctc\tce\tjoint_fraction\n";
  std::ofstream epochs_log(out / "epochs.tsv", std::ios::trunc);
  epochs_log << "epoch\tcheckpoint\tdev_cer\tdev_exact\tdev_miss\n";

  std::vector<std::string> checkpoint_paths;
  TrainHooks hooks;
  hooks.on_step = [&](const StepRecord& r) {
    metrics << r.step << "\t" << format_double(r.lr) << "\t"
            << format_double(r.loss) << "\t" << format_double(r.ctc) << "\t"
            << format_double(r.ce) << "\t" << format_double(r.joint_fraction)
            << "\n";
  };
  hooks.on_epoch = [&](std::size_t epoch, const ModelParams<float>& m) {
    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%03zu.stnt", epoch + 1);
    const auto path = (out / "checkpoints" / name).string();
    save_model(m, path);
    checkpoint_paths.push_back(path);
    epochs_log << (epoch + 1) << "\t" << name;
    if (!dev_utts.empty()) {
      const auto s = score_dev(m, dev_utts);
      epochs_log << "\t" << fmt(s.cer) << "\t" << fmt(s.exact_fraction) << "\t"
                 << fmt(s.miss_fraction);
    } else {
      epochs_log << "\t-\t-\t-";
    }
    epochs_log << "\n";
    epochs_log.flush();
  };

  train_loop(train_utts, mcfg, tcfg, opt.seed, hooks);

  const std::size_t k = std::min<std::size_t>(tcfg.average_last_k,
                                              checkpoint_paths.size());
  const std::vector<std::string> last(checkpoint_paths.end() -
                                          static_cast<std::ptrdiff_t>(k),
                                      checkpoint_paths.end());
  const auto averaged = average_checkpoints(last);
  save_model(averaged, (out / "averaged.stnt").string());
  std::cout << "train: " << checkpoint_paths.size()
            << " epoch checkpoints; averaged last " << k << " into "
            << (out / "averaged.stnt").string() << "\n";
  if (!dev_utts.empty()) {
    const auto s = score_dev(averaged, dev_utts);
    std::cout << "train: averaged model dev CER " << fmt(s.cer) << ", exact "
              << fmt(s.exact_fraction) << ", miss " << fmt(s.miss_fraction)
              << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// decode: hypotheses (and an RTF ledger in --rtf mode).
// ---------------------------------------------------------------------------

struct DecodeCmdOptions {
  std::string ckpt;
  std::string manifest;
  std::string vocab_path;
  std::string out_dir;
  std::string lm_path;  // optional
  double lambda = 0.0;
  std::size_t beam = 5;
  bool use_beam = false;  // set when --lm/--beam/--lambda given
  bool rtf = false;
  std::size_t threads = 1;
};

inline void write_hyp_file(const std::string& path,
                           const std::vector<HypRow>& hyps,
                           const Vocab& vocab) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  for (const auto& h : hyps)
    out << h.id << "\t" << vocab.detokenize(h.tokens) << "\n";
}

inline void write_ledger_file(const std::string& path,
                              const DecodeLedger& ledger) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  for (const auto& r : ledger.rows)
    out << r.id << "\t" << fmt(r.audio_seconds, 3) << "\t"
        << fmt(r.decode_seconds, 9) << "\n";
}

inline int cmd_decode(const DecodeCmdOptions& opt) {
  const auto model = load_model<float>(opt.ckpt);
  const Vocab vocab = resolve_vocab(opt.vocab_path, opt.manifest);
  if (vocab.size() != model.cfg.vocab_size)
    throw FormatError("decode: vocabulary size " +
                      std::to_string(vocab.size()) +
                      " does not match checkpoint (" +
                      std::to_string(model.cfg.vocab_size) + ")");
  const auto utts = load_manifest(opt.manifest, vocab);

  std::optional<LmParams<float>> lm;
  if (!opt.lm_path.empty()) {
    lm = load_lm<float>(opt.lm_path);
    if (lm->cfg.vocab_size != model.cfg.vocab_size)
      throw FormatError("decode: LM vocabulary does not match the model");
  }

  DecodeOptions dopt;
  dopt.lm = lm ? &*lm : nullptr;
  dopt.lambda = opt.lambda;
  dopt.beam = opt.beam;
  dopt.use_beam = opt.use_beam || dopt.lm != nullptr;
  dopt.rtf = opt.rtf;
  dopt.threads = opt.threads;
  const auto res = batch_decode(model, utts, dopt);

  fsys::create_directories(opt.out_dir);
  const fsys::path out(opt.out_dir);
  write_hyp_file((out / "hyp.tsv").string(), res.hyps, vocab);
  if (opt.rtf) {
    write_ledger_file((out / "ledger.tsv").string(), res.ledger);
    const auto r = rtf(res.ledger);
    std::cout << "decode: RTF " << fmt(r.rtf, 6) << " ("
              << fmt(r.total_decode_seconds, 3) << "s decode / "
              << fmt(r.total_audio_seconds, 3) << "s audio)\n";
  }
  std::ostringstream run;
  run << "command = decode\nckpt = " << opt.ckpt << "\nlambda = "
      << format_double(opt.lambda) << "\nbeam = " << opt.beam
      << "\nrtf = " << (opt.rtf ? "true" : "false") << "\n";
  write_text_file((out / "run.cfg").string(), run.str());
  for (const auto& h : res.hyps)
    if (!h.error.empty())
      std::cerr << "decode: " << h.id << " failed: " << h.error << "\n";
  std::cout << "decode: " << res.hyps.size() - res.failures << "/"
            << res.hyps.size() << " utterances decoded\n";
  return res.failures == 0 ? 0 : 1;
}

// ---------------------------------------------------------------------------
// eval: corpus CER between a hypothesis file and reference transcripts.
// ---------------------------------------------------------------------------

struct EvalOptions {
  std::string hyp_path;
  std::string ref_path;  // manifest (3 columns) or id<TAB>text
  std::string vocab_path;
  std::string out_path;  // optional TSV report
};

inline std::vector<std::pair<std::string, std::string>> read_id_text(
    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cols = split_tabs(line);
    if (cols.size() == 2)
      out.emplace_back(cols[0], cols[1]);
    else if (cols.size() == 3)
      out.emplace_back(cols[0], cols[2]);  // manifest row
    else
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": expected 2 or 3 tab-separated fields");
  }
  return out;
}

inline int cmd_eval(const EvalOptions& opt) {
  const Vocab vocab = resolve_vocab(opt.vocab_path, opt.ref_path);
  const auto hyp = read_id_text(opt.hyp_path);
  const auto ref = read_id_text(opt.ref_path);
  std::set<std::string> hyp_ids, ref_ids;
  for (const auto& [id, text] : hyp) hyp_ids.insert(id);
  for (const auto& [id, text] : ref) ref_ids.insert(id);
  if (hyp_ids != ref_ids) {
    std::ostringstream msg;
    msg << "eval: hypothesis and reference id sets differ;";
    for (const auto& id : ref_ids)
      if (!hyp_ids.count(id)) msg << " missing:" << id;
    for (const auto& id : hyp_ids)
      if (!ref_ids.count(id)) msg << " extra:" << id;
    throw UsageError(msg.str());
  }
  std::map<std::string, std::string> hyp_by_id(hyp.begin(), hyp.end());
  std::vector<std::pair<TokenSequence, TokenSequence>> pairs;
  for (const auto& [id, text] : ref)
    pairs.emplace_back(vocab.tokenize(hyp_by_id.at(id)),
                       vocab.tokenize(text));
  const auto c = corpus_cer(pairs);
  std::ostringstream report;
  report << "utterances\t" << ref.size() << "\n"
         << "ref_chars\t" << c.ref_len << "\n"
         << "distance\t" << c.distance << "\n"
         << "substitutions\t" << c.substitutions << "\n"
         << "deletions\t" << c.deletions << "\n"
         << "insertions\t" << c.insertions << "\n"
         << "cer\t" << fmt(c.rate) << "\n";
  std::cout << report.str();
  if (!opt.out_path.empty()) write_text_file(opt.out_path, report.str());
  return 0;
}

// ---------------------------------------------------------------------------
// analyze: length-error histogram, spike/boundary report, attention export.
// ---------------------------------------------------------------------------

struct AnalyzeOptions {
  std::string ckpt;
  std::string manifest;
  std::string vocab_path;
  std::string boundaries_path;  // default: boundaries.tsv next to manifest
  std::string out_dir;
  std::string utt_id;       // attention export target; default first
  long layer = -1;          // default: 4th decoder block when present
  std::size_t head = 0;
};

inline int cmd_analyze(const AnalyzeOptions& opt) {
  const auto model = load_model<float>(opt.ckpt);
  const Vocab vocab = resolve_vocab(opt.vocab_path, opt.manifest);
  const auto utts = load_manifest(opt.manifest, vocab);
  if (utts.empty()) throw UsageError("analyze: empty manifest");
  const auto bounds_path = opt.boundaries_path.empty()
                               ? sibling(opt.manifest, "boundaries.tsv")
                               : opt.boundaries_path;
  const auto bounds = load_boundaries(bounds_path);

  fsys::create_directories(opt.out_dir);
  const fsys::path out(opt.out_dir);

  std::vector<std::pair<std::size_t, std::size_t>> lens;
  std::size_t spike_total = 0, spike_inside = 0, spike_long_sil = 0;
  std::ofstream spikes(out / "spikes.tsv", std::ios::trunc);
  spikes << "utt\ttrigger_frame\tfeat_begin\tfeat_end\tverdict\n";
  for (const auto& u : utts) {
    Graph<float> g;
    g.recording = false;
    RunCtx<float> ctx{g};
    const auto fwd = forward_st_nat(ctx, model, u.features);
    lens.emplace_back(u.transcript.size(), fwd.trig.size());
    const auto it = bounds.find(u.id);
    if (it == bounds.end()) continue;
    const auto rep = spike_boundary_report(fwd.trig, it->second, u.frames());
    spike_total += rep.spikes.size();
    spike_inside += rep.n_inside;
    spike_long_sil += rep.n_in_long_silence;
    for (const auto& s : rep.spikes) {
      spikes << u.id << "\t" << s.trigger_frame << "\t" << s.feat_begin << "\t"
             << s.feat_end << "\t";
      if (s.token_index >= 0)
        spikes << "char" << s.token_index;
      else
        spikes << (s.in_long_silence ? "silence_long" : "silence");
      spikes << "\n";
    }
  }
  spikes << "#summary\tspikes " << spike_total << "\tinside " << spike_inside
         << "\tin_long_silence " << spike_long_sil << "\tinside_fraction "
         << fmt(spike_total ? static_cast<double>(spike_inside) / spike_total
                            : 1.0)
         << "\n";

  const auto hist = length_histogram(lens);
  std::ofstream hist_out(out / "length_hist.tsv", std::ios::trunc);
  hist_out << "diff\tcount\n";
  for (const auto& [diff, count] : hist.bins)
    hist_out << diff << "\t" << count << "\n";
  hist_out << "#summary\ttotal " << hist.total << "\texact " << hist.exact
           << "\tmiss_fraction " << fmt(hist.miss_fraction) << "\n";

  // attention map of one utterance
  const Utterance* target = &utts.front();
  if (!opt.utt_id.empty()) {
    target = nullptr;
    for (const auto& u : utts)
      if (u.id == opt.utt_id) target = &u;
    if (!target)
      throw UsageError("analyze: utterance '" + opt.utt_id +
                       "' not in manifest");
  }
  const std::size_t layer =
      opt.layer >= 0 ? static_cast<std::size_t>(opt.layer)
                     : std::min<std::size_t>(3, model.dec_blocks.size() - 1);
  const auto attn =
      export_attention(model, target->features, layer, opt.head);
  write_features(attn, (out / ("attention_" + target->id + ".fmat")).string());

  std::cout << "analyze: " << utts.size() << " utterances; exact length "
            << hist.exact << "/" << hist.total << "; miss fraction "
            << fmt(hist.miss_fraction) << "; spike inside fraction "
            << fmt(spike_total ? static_cast<double>(spike_inside) / spike_total
                               : 1.0)
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// bench: threshold sweep (Table-2 style grid) reporting T' statistics, CER,
// and RTF per threshold.
// ---------------------------------------------------------------------------

struct BenchOptions {
  std::string ckpt;
  std::string manifest;
  std::string vocab_path;
  std::string out_path;  // optional
};

inline int cmd_bench(const BenchOptions& opt) {
  auto model = load_model<float>(opt.ckpt);
  const Vocab vocab = resolve_vocab(opt.vocab_path, opt.manifest);
  const auto utts = load_manifest(opt.manifest, vocab);
  if (utts.empty()) throw UsageError("bench: empty manifest");

  std::ostringstream table;
  table << "beta\tmean_tprime\texact\tmiss\tcer\trtf\n";
  for (const double beta : {0.1, 0.3, 0.5, 0.7}) {
    model.cfg.beta = beta;
    DecodeOptions dopt;
    dopt.rtf = true;
    const auto res = batch_decode(model, utts, dopt);
    if (res.failures)
      throw Error("bench: decoding failed for " +
                  std::to_string(res.failures) + " utterances");
    std::vector<std::pair<TokenSequence, TokenSequence>> pairs;
    std::vector<std::pair<std::size_t, std::size_t>> lens;
    double tprime_sum = 0;
    for (std::size_t i = 0; i < utts.size(); ++i) {
      pairs.emplace_back(res.hyps[i].tokens, utts[i].transcript);
      Graph<float> g;
      g.recording = false;
      RunCtx<float> ctx{g};
      const auto trig =
          trigger(PosteriorGrid<float>{ctc_head(
                      ctx, encode(ctx, model, utts[i].features), model.ctc_w,
                      model.ctc_b)},
                  beta);
      lens.emplace_back(utts[i].transcript.size(), trig.size());
      tprime_sum += static_cast<double>(trig.size());
    }
    const auto c = corpus_cer(pairs);
    const auto h = length_histogram(lens);
    const auto r = rtf(res.ledger);
    table << fmt(beta, 1) << "\t" << fmt(tprime_sum / utts.size(), 3) << "\t"
          << fmt(static_cast<double>(h.exact) / h.total, 4) << "\t"
          << fmt(h.miss_fraction, 4) << "\t" << fmt(c.rate, 4) << "\t"
          << fmt(r.rtf, 6) << "\n";
  }
  std::cout << table.str();
  if (!opt.out_path.empty()) write_text_file(opt.out_path, table.str());
  return 0;
}

}  // namespace stnat::cmd
