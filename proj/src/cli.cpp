#include "mic/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <optional>

#include "mic/certify.hpp"
#include "mic/corpus.hpp"
#include "mic/diagnostics.hpp"
#include "mic/error.hpp"
#include "mic/eval.hpp"
#include "mic/rng.hpp"
#include "mic/trainer.hpp"

namespace mic::cli {

namespace fs = std::filesystem;

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string join(const std::vector<std::string>& xs) {
  std::string out;
  for (const auto& x : xs) out += (out.empty() ? "" : ", ") + x;
  return out;
}

std::vector<std::vector<std::int32_t>> tokenize_all(const std::vector<std::string>& texts,
                                                    std::size_t vocab) {
  std::vector<std::vector<std::int32_t>> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(tokenize(t, vocab));
  return out;
}

/// 4, 8, 16, ... below d_full; {1} for very narrow models.
std::vector<std::size_t> default_sub_dims(std::size_t d_full) {
  std::vector<std::size_t> out;
  for (std::size_t d = 4; d < d_full; d *= 2) out.push_back(d);
  if (out.empty() && d_full >= 2) out.push_back(1);
  return out;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string kind;
  std::size_t size = 0;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t classes = 8;
  std::size_t batch_size = 32;
};

int gen_corpus(const GenArgs& a, std::ostream& out) {
  const data::CorpusKind kind = data::parse_corpus_kind(a.kind);
  if (a.size < a.batch_size) {
    throw ConfigError("--size " + std::to_string(a.size) + " is below the batch size " +
                      std::to_string(a.batch_size));
  }
  data::GeneratorOptions opts;
  opts.classes = a.classes;
  data::write_file(a.out, data::generate_corpus(kind, a.size, a.seed, opts));
  out << "wrote " << a.size << " " << a.kind << " examples to " << a.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::optional<std::string> preset;
  std::optional<std::string> config;
  std::string corpus;
  std::string out;
  std::optional<std::string> resume;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> stop_at_step;
  std::optional<std::string> dims;
  std::optional<std::size_t> epochs;
};

int train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  train::TrainConfig cfg;
  if (a.resume) {
    if (a.preset || a.config || a.seed || a.dims || a.epochs) {
      throw ConfigError(
          "--resume continues with the checkpoint's configuration; drop "
          "--preset/--config/--seed/--dims/--epochs");
    }
  } else {
    nlohmann::json j = nlohmann::json::object();
    if (a.config) {
      try {
        j = nlohmann::json::parse(data::read_file(*a.config));
      } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(*a.config + ": " + e.what());
      }
      if (!j.is_object()) throw ConfigError(*a.config + ": expected a JSON object");
    }
    if (a.preset) j["preset"] = *a.preset;
    if (a.seed) j["seed"] = *a.seed;
    if (a.epochs) j["epochs"] = *a.epochs;
    if (a.dims) j["contrastive"]["dims"] = parse_dims(*a.dims);
    cfg = train::TrainConfig::from_json(j);
  }

  const std::string corpus_bytes = data::read_file(a.corpus);
  const auto sentences = data::read_sentences(a.corpus);
  std::size_t vocab = cfg.encoder.vocab_size;
  if (a.resume) vocab = train::load_encoder(*a.resume).config().vocab_size;

  train::RunOptions opts;
  opts.out_dir = a.out;
  if (a.resume) opts.resume_from = fs::path(*a.resume);
  opts.stop_at_step = a.stop_at_step;
  opts.corpus_path = a.corpus;
  opts.corpus_hash = hex64(fnv1a64(corpus_bytes));
  try {
    const train::RunResult r = train::run(cfg, tokenize_all(sentences, vocab), opts);
    out << "trained to step " << r.state.step << " of " << r.state.total_steps << "; artifacts in "
        << a.out << "\n";
  } catch (const NonFiniteError& e) {
    err << "training aborted: non-finite value in " << e.component() << "\n";
    return kCheckFailed;
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct DiagArgs {
  std::optional<std::string> checkpoint;
  std::optional<std::string> embeddings;
  std::optional<std::string> corpus;
  std::optional<std::string> dims;
  std::optional<std::string> layers;
  std::string out;
  double tau = 0.1;
  std::uint64_t seed = 0;
};

int diagnose(const DiagArgs& a, std::ostream& out) {
  if (a.checkpoint.has_value() == a.embeddings.has_value()) {
    throw ConfigError("give exactly one of --checkpoint or --embeddings");
  }
  Tensor emb;
  std::optional<Encoder> enc;
  std::vector<std::vector<std::int32_t>> seqs;
  nlohmann::json summary;
  if (a.checkpoint) {
    if (!a.corpus) throw ConfigError("--checkpoint needs --corpus to embed");
    enc.emplace(train::load_encoder(*a.checkpoint));
    seqs = tokenize_all(data::read_sentences(*a.corpus), enc->config().vocab_size);
    if (seqs.empty()) throw ConfigError(*a.corpus + ": no sentences");
    emb = diag::embed_sequences(*enc, seqs);
    summary["input"] = {{"checkpoint", *a.checkpoint}, {"corpus", *a.corpus}};
  } else {
    emb = diag::read_embeddings(*a.embeddings);
    summary["input"] = {{"embeddings", *a.embeddings}};
  }
  const std::size_t d_full = emb.dim(1);
  const std::vector<std::size_t> dims = a.dims ? parse_dims(*a.dims) : default_sub_dims(d_full);
  for (std::size_t d : dims) {
    if (d >= d_full) {
      throw ConfigError("crosscorr needs every --dims entry below d_full=" +
                        std::to_string(d_full) + ", got " + std::to_string(d));
    }
  }
  std::vector<std::size_t> nested = dims;
  nested.push_back(d_full);

  fs::create_directories(a.out);
  const diag::VarianceProfile profile = diag::variance_profile(emb, nested);
  data::write_file(fs::path(a.out) / "variance_profile.csv", diag::profile_csv(profile));

  summary["n"] = emb.dim(0);
  summary["d_full"] = d_full;
  summary["dims"] = dims;
  summary["tau"] = a.tau;
  summary["variance_profile"] = diag::to_json(profile);
  summary["crosscorr"] = nlohmann::json::array();
  summary["covariance"] = nlohmann::json::array();
  for (std::size_t d : dims) {
    const diag::CorrMap map = diag::cross_corr_map(emb, d, a.tau);
    data::write_file(fs::path(a.out) / ("crosscorr_d" + std::to_string(d) + ".csv"),
                     diag::heatmap_csv(map));
    summary["crosscorr"].push_back(diag::to_json(map));
    summary["covariance"].push_back(diag::to_json(diag::covariance_partition(emb, d)));
  }
  summary["uniformity"] = diag::to_json(diag::uniformity_report(emb, nested, {}, a.seed));

  if (enc) {
    std::vector<std::size_t> layers;
    if (a.layers) {
      layers = parse_dims(*a.layers + "");
    } else {
      for (std::size_t l : LayerSelection{}.aligned_layers) {
        if (l < enc->config().n_layers) layers.push_back(l);
      }
    }
    summary["token_crosscorr"] = nlohmann::json::array();
    for (std::size_t l : layers) {
      const diag::LayerStates states = diag::layer_states(*enc, seqs, l);
      for (std::size_t d : dims) {
        nlohmann::json row = diag::to_json(diag::cross_corr_map(states.h, states.mask, d, a.tau));
        row["layer"] = l;
        summary["token_crosscorr"].push_back(row);
      }
    }
  }
  data::write_file(fs::path(a.out) / "summary.json", summary.dump(2) + "\n");
  out << "diagnostics for " << emb.dim(0) << " x " << d_full << " embeddings written to " << a.out
      << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct GradArgs {
  std::string scope = "all";
  std::optional<std::string> out;
  std::size_t seeds = 3;
  std::size_t coords = 12;
  std::string corrupt_op;
};

int gradcheck(const GradArgs& a, std::ostream& out, std::ostream& err) {
  cert::SuiteOptions opts;
  opts.seeds.clear();
  for (std::size_t s = 0; s < a.seeds; ++s) opts.seeds.push_back(s);
  if (opts.seeds.empty()) throw ConfigError("--seeds must be >= 1");
  opts.end2end_coords_per_param = a.coords;
  opts.check.fault_op = a.corrupt_op;
  const cert::SuiteReport report = cert::run_suite(cert::parse_scope(a.scope), opts);
  nlohmann::json j = report.to_json();
  j["scope"] = a.scope;
  if (a.out) data::write_file(*a.out, j.dump(2) + "\n");
  for (const auto& [label, v] : j["max_rel_error_by_loss"].items()) {
    out << label << " max_rel_error=" << v.get<double>() << "\n";
  }
  if (!report.passed()) {
    const auto& w = report.worst();
    err << "gradcheck FAILED: worst offender " << w.label << " (param " << w.worst_param()
        << ", max relative error " << w.max_rel_error() << ")\n";
    return kCheckFailed;
  }
  out << "gradcheck passed (" << report.checks.size() << " checks)\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string task;
  std::string checkpoint;
  std::string data;
  std::optional<std::string> dims;
  std::string out;
  std::uint64_t seed = 0;
};

int evaluate(const EvalArgs& a, std::ostream& out) {
  const auto tasks = eval::task_names();
  if (std::find(tasks.begin(), tasks.end(), a.task) == tasks.end()) {
    throw ConfigError("unknown task '" + a.task + "' (available: " + join(tasks) + ")");
  }
  const Encoder enc = train::load_encoder(a.checkpoint);
  const std::size_t d_full = enc.config().d_full;
  std::vector<std::size_t> dims;
  if (a.dims) {
    dims = parse_dims(*a.dims);
  } else {
    dims = default_sub_dims(d_full);
    dims.push_back(d_full);
  }
  for (std::size_t d : dims) {
    if (d > d_full) {
      throw ConfigError("--dims entry " + std::to_string(d) + " exceeds d_full=" +
                        std::to_string(d_full));
    }
  }
  eval::EvalReport report;
  if (a.task == "sts") {
    report = eval::sts_eval(enc, data::read_pairs(a.data), dims);
  } else if (a.task == "pairs") {
    report = eval::pair_eval(enc, data::read_pairs(a.data), dims);
  } else {
    report = eval::probe_eval(enc, data::read_labeled(a.data), dims, a.seed);
  }
  report.seed = a.seed;
  fs::create_directories(a.out);
  data::write_file(fs::path(a.out) / (a.task + "_report.csv"), report.to_csv());
  nlohmann::json j = report.to_json();
  j["checkpoint"] = a.checkpoint;
  j["data"] = a.data;
  data::write_file(fs::path(a.out) / (a.task + "_report.json"), j.dump(2) + "\n");
  out << report.to_csv();
  return kOk;
}

}  // namespace

std::vector<std::size_t> parse_dims(const std::string& text) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::string field = text.substr(start, comma - start);
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(field, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (field.empty() || used != field.size() || field.front() == '-' || v == 0) {
      throw ConfigError("bad dimension list '" + text + "': expected positive integers like 4,8,16");
    }
    if (!out.empty() && v <= out.back()) {
      throw ConfigError("dimension list '" + text + "' must be strictly increasing");
    }
    out.push_back(v);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"mic: nested embedding training with collapse and isotropy regularizers", "mic"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-corpus", "Write a deterministic synthetic TSV dataset");
  g->add_option("--kind", gen.kind, "clusters | sts-graded | pairs")->required();
  g->add_option("--size", gen.size, "Number of examples")->required();
  g->add_option("--seed", gen.seed, "Generator seed");
  g->add_option("--out", gen.out, "Output TSV path")->required();
  g->add_option("--classes", gen.classes, "Topic classes");
  g->add_option("--batch-size", gen.batch_size, "Minimum size accepted");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the toy encoder and write run artifacts");
  t->add_option("--preset", tr.preset, "mic | mrl | scr-only | sir-only | backbone");
  t->add_option("--config", tr.config, "JSON config file");
  t->add_option("--corpus", tr.corpus, "Training TSV")->required();
  t->add_option("--out", tr.out, "Run directory")->required();
  t->add_option("--resume", tr.resume, "Run directory to continue from");
  t->add_option("--seed", tr.seed, "Run seed");
  t->add_option("--stop-at-step", tr.stop_at_step, "Stop after this many global steps");
  t->add_option("--dims", tr.dims, "Nested dims, e.g. 4,8,16,32");
  t->add_option("--epochs", tr.epochs, "Epoch count override");

  DiagArgs dg;
  auto* d = app.add_subcommand("diagnose", "Variance, correlation, covariance and uniformity diagnostics");
  d->add_option("--checkpoint", dg.checkpoint, "Checkpoint file or run directory");
  d->add_option("--embeddings", dg.embeddings, "Embedding file (CSV or JSON-header binary)");
  d->add_option("--corpus", dg.corpus, "Sentences to embed with --checkpoint");
  d->add_option("--dims", dg.dims, "Prefix dims below d_full, e.g. 4,8,16");
  d->add_option("--layers", dg.layers, "Layers for token-level maps, e.g. 1,2");
  d->add_option("--out", dg.out, "Output directory")->required();
  d->add_option("--tau", dg.tau, "Correlation threshold");
  d->add_option("--seed", dg.seed, "Uniformity subsample seed");

  GradArgs gr;
  auto* c = app.add_subcommand("gradcheck", "Certify gradients against central differences");
  c->add_option("--scope", gr.scope, "losses | end2end | all");
  c->add_option("--out", gr.out, "Report JSON path");
  c->add_option("--seeds", gr.seeds, "Number of input seeds");
  c->add_option("--coords", gr.coords, "Sampled coordinates per encoder parameter");
  c->add_option("--corrupt-op", gr.corrupt_op)->group("");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint at nested dims");
  e->add_option("--task", ev.task, "sts | pairs | probe")->required();
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file or run directory")->required();
  e->add_option("--data", ev.data, "TSV dataset")->required();
  e->add_option("--dims", ev.dims, "Dims, e.g. 4,8,16,32");
  e->add_option("--out", ev.out, "Output directory")->required();
  e->add_option("--seed", ev.seed, "Probe split seed");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& ex) {
    err << "usage error: " << ex.what() << "\n" << app.help();
    return kUsage;
  }

  try {
    if (g->parsed()) return gen_corpus(gen, out);
    if (t->parsed()) return train(tr, out, err);
    if (d->parsed()) return diagnose(dg, out);
    if (c->parsed()) return gradcheck(gr, out, err);
    if (e->parsed()) return evaluate(ev, out);
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const ParseError& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const InvalidDimension& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const fs::filesystem_error& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const NonFiniteError& ex) {
    err << "error: non-finite value in " << ex.component() << ": " << ex.what() << "\n";
    return kCheckFailed;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kCheckFailed;
  }
  return kUsage;
}

}  // namespace mic::cli
