#include "cli_app.hpp"

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "exmap/bda.hpp"
#include "exmap/dataset.hpp"
#include "exmap/mappers.hpp"
#include "exmap/metrics.hpp"
#include "exmap/mia.hpp"
#include "exmap/replay.hpp"
#include "exmap/rig.hpp"
#include "exmap/server.hpp"

namespace exmap::cli {

namespace {

constexpr std::uint64_t kDefaultSeed = 42;

std::string env_name(const std::string& sub, const std::string& flag) {
  std::string out = "EXMAP_" + sub + "_" + flag;
  for (auto& c : out) {
    if (c == '-') c = '_';
    c = char(std::toupper(static_cast<unsigned char>(c)));
  }
  return out;
}

/// Adds an option with the documented environment-variable override.
template <typename T>
CLI::Option* opt(CLI::App* sub, const std::string& flag, T& var, const std::string& help) {
  auto* o = sub->add_option("--" + flag, var, help);
  o->envname(env_name(sub->get_name(), flag));
  return o;
}

void log_resolved_config(const CLI::App* sub) {
  nlohmann::ordered_json flags;
  for (const auto* o : sub->get_options()) {
    if (o->get_name() == "--help") continue;
    const auto& res = o->results();
    if (res.empty())
      flags[o->get_name()] = o->get_default_str();
    else if (res.size() == 1)
      flags[o->get_name()] = res.front();
    else
      flags[o->get_name()] = res;
  }
  nlohmann::ordered_json j{{"command", sub->get_name()}, {"flags", std::move(flags)}};
  std::cerr << j.dump() << "\n";
}

data::Manifest manifest_from(const std::string& path) {
  return path.empty() ? data::Manifest::canonical() : data::Manifest::load(path);
}

data::LoadResult load_required(const std::string& path, const std::string& manifest_path,
                               bool need_targets) {
  auto result = data::load_pairs(path, manifest_from(manifest_path));
  if (need_targets && !result.targets_present)
    throw Error("missing-input", path + " has no 'q' targets");
  return result;
}

Eigen::VectorXd ridge_target(const data::ExpressionParams& q) {
  Eigen::VectorXd y = Eigen::VectorXd::Zero(mappers::kRidgeOutDim);
  y.head<kExprCount>() = q.expr;
  y.segment<3>(100) = matrix_to_axis_angle(rot6d_to_matrix(Vec6<double>(q.jaw6d)));
  y.segment<3>(103) = matrix_to_axis_angle(rot6d_to_matrix(Vec6<double>(q.eye_l6d)));
  y.segment<3>(106) = matrix_to_axis_angle(rot6d_to_matrix(Vec6<double>(q.eye_r6d)));
  return y;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("io-error", "cannot write " + path);
  out << text;
  if (!out) throw Error("io-error", "write failed: " + path);
}

std::pair<std::string, std::uint16_t> parse_endpoint(const std::string& endpoint) {
  const auto colon = endpoint.rfind(':');
  if (colon == std::string::npos)
    throw Error("bad-input", "endpoint must look like host:port");
  const int port = std::stoi(endpoint.substr(colon + 1));
  if (port <= 0 || port > 65535) throw Error("bad-input", "port out of range");
  return {endpoint.substr(0, colon), std::uint16_t(port)};
}

std::atomic<stream::Server*> g_server{nullptr};

void add_synth_data(CLI::App& app) {
  auto* sub = app.add_subcommand("synth-data", "generate seeded synthetic datasets and assets");
  sub->option_defaults()->always_capture_default();
  struct S {
    std::string out, vr_out, model_out, cloud_out;
    int subjects = 10, frames = 2000, sources = 1;
    double alpha = 0.5, vr_sigma = 0.01;
    int model_v = 800, ke = 50, gaussians = 2000, sh_degree = 0;
    std::uint64_t seed = kDefaultSeed;
  };
  auto st = std::make_shared<S>();
  opt(sub, "out", st->out, "output JSONL of paired samples")->required();
  opt(sub, "subjects", st->subjects, "subjects per source");
  opt(sub, "frames", st->frames, "frames per subject");
  opt(sub, "sources", st->sources, "number of data sources (id prefix d<k>/)");
  opt(sub, "alpha", st->alpha, "oracle nonlinearity strength");
  opt(sub, "seed", st->seed, "generator seed");
  opt(sub, "vr-out", st->vr_out, "also write headset-remapped frames (no targets)");
  opt(sub, "vr-sigma", st->vr_sigma, "noise std for the headset remap");
  opt(sub, "model-out", st->model_out, "also write a synthetic head model");
  opt(sub, "model-v", st->model_v, "vertex count for the synthetic model");
  opt(sub, "ke", st->ke, "expression basis size for the synthetic model");
  opt(sub, "cloud-out", st->cloud_out, "also write a Gaussian cloud bound to the model");
  opt(sub, "gaussians", st->gaussians, "Gaussian count for the cloud");
  opt(sub, "sh-degree", st->sh_degree, "SH degree for the cloud");
  sub->callback([sub, st] {
    log_resolved_config(sub);
    std::vector<data::PairedSample> all;
    for (int src = 0; src < st->sources; ++src) {
      auto oracle = data::SyntheticOracle::make(mix64(st->seed, std::uint64_t(src)),
                                                st->alpha, st->subjects);
      auto samples = data::synth_pairs(oracle, st->subjects, st->frames);
      if (st->sources > 1)
        for (auto& s : samples)
          s.frame.subject_id = "d" + std::to_string(src) + "/" + s.frame.subject_id;
      all.insert(all.end(), samples.begin(), samples.end());
    }
    data::save_pairs(st->out, all, /*with_targets=*/true);
    if (!st->vr_out.empty()) {
      auto vr = data::synth_vr_pairs(all, mix64(st->seed, 0x7f), st->vr_sigma);
      std::vector<data::PairedSample> frames;
      frames.reserve(vr.pairs.size());
      for (auto& p : vr.pairs) frames.push_back({std::move(p.vr), {}});
      data::save_pairs(st->vr_out, frames, /*with_targets=*/false);
    }
    if (!st->model_out.empty())
      flame::save_model(flame::synth_model(st->seed, st->model_v, st->ke), st->model_out);
    if (!st->cloud_out.empty()) {
      if (st->model_out.empty())
        throw Error("missing-input", "--cloud-out requires --model-out");
      auto model = flame::load_model(st->model_out);
      flame::Mesh rest{model.template_vertices, model.faces};
      rig::save_cloud(rig::synth_cloud(st->seed, rest, std::size_t(st->gaussians),
                                       st->sh_degree),
                      st->cloud_out);
    }
  });
}

void add_fit_bda(CLI::App& app) {
  auto* sub = app.add_subcommand("fit-bda", "fit the affine blendshape alignment");
  sub->option_defaults()->always_capture_default();
  struct S {
    std::string vr, ref, out, manifest;
  };
  auto st = std::make_shared<S>();
  opt(sub, "vr", st->vr, "JSONL of headset-convention frames")->required();
  opt(sub, "ref", st->ref, "JSONL of reference-convention frames")->required();
  opt(sub, "out", st->out, "output alignment file")->required();
  opt(sub, "manifest", st->manifest, "coefficient ordering manifest (default: built-in)");
  sub->callback([sub, st] {
    log_resolved_config(sub);
    auto vr = load_required(st->vr, st->manifest, false);
    auto ref = load_required(st->ref, st->manifest, false);
    std::map<std::pair<std::string, std::uint64_t>, const data::BlendshapeFrame*> by_key;
    for (const auto& s : ref.samples)
      by_key[{s.frame.subject_id, s.frame.frame_id}] = &s.frame;
    std::vector<std::pair<BlendshapeVec, BlendshapeVec>> pairs;
    for (const auto& s : vr.samples) {
      auto it = by_key.find({s.frame.subject_id, s.frame.frame_id});
      if (it != by_key.end()) pairs.emplace_back(s.frame.coeffs, it->second->coeffs);
    }
    auto alignment = bda::fit_bda(pairs);
    bda::save_alignment(alignment, st->out);
    nlohmann::ordered_json j{{"pairs", pairs.size()},
                             {"train_mse", alignment.fit_stats.train_mse}};
    std::cout << j.dump() << "\n";
  });
}

void add_train_epm(CLI::App& app) {
  auto* sub = app.add_subcommand("train-epm", "train the expression parameter mapper");
  sub->option_defaults()->always_capture_default();
  struct S {
    std::string train, val, out, report, manifest;
    mappers::TrainHyper hyper;
    double dropout = 0.1;
  };
  auto st = std::make_shared<S>();
  st->hyper.seed = kDefaultSeed;
  opt(sub, "train", st->train, "training JSONL (with targets)")->required();
  opt(sub, "val", st->val, "validation JSONL (with targets)")->required();
  opt(sub, "out", st->out, "output model file")->required();
  opt(sub, "report", st->report, "write the training report JSON here");
  opt(sub, "manifest", st->manifest, "coefficient ordering manifest");
  opt(sub, "lr", st->hyper.lr, "Adam learning rate");
  opt(sub, "batch", st->hyper.batch_size, "batch size");
  opt(sub, "epochs", st->hyper.epochs, "training epochs");
  opt(sub, "seed", st->hyper.seed, "training seed");
  opt(sub, "weight-decay", st->hyper.weight_decay, "L2 weight decay");
  opt(sub, "dropout", st->dropout, "dropout probability inside residual blocks");
  sub->callback([sub, st] {
    log_resolved_config(sub);
    auto train = load_required(st->train, st->manifest, true);
    auto val = load_required(st->val, st->manifest, true);
    nn::EpmConfig config;
    config.dropout_p = st->dropout;
    auto [model, report] = mappers::epm_train(train.samples, val.samples, config, st->hyper);
    if (report.diverged) throw Error("divergence", "training loss became non-finite");
    mappers::save_model(model, st->out);
    if (!st->report.empty()) write_text(st->report, report.to_json());
    nlohmann::ordered_json j{{"best_epoch", report.best_epoch},
                             {"val_l1", report.val_l1.empty()
                                            ? -1.0
                                            : report.val_l1[std::size_t(report.best_epoch)]}};
    std::cout << j.dump() << "\n";
  });
}

void add_fit_ridge(CLI::App& app) {
  auto* sub = app.add_subcommand("fit-ridge", "fit the linear baseline mapper");
  sub->option_defaults()->always_capture_default();
  struct S {
    std::string train, out, manifest;
    double lambda = 1.0;
  };
  auto st = std::make_shared<S>();
  opt(sub, "train", st->train, "training JSONL (with targets)")->required();
  opt(sub, "out", st->out, "output mapper file")->required();
  opt(sub, "lambda", st->lambda, "ridge regularization strength");
  opt(sub, "manifest", st->manifest, "coefficient ordering manifest");
  sub->callback([sub, st] {
    log_resolved_config(sub);
    auto train = load_required(st->train, st->manifest, true);
    std::vector<std::pair<BlendshapeVec, Eigen::VectorXd>> samples;
    samples.reserve(train.samples.size());
    for (const auto& s : train.samples)
      samples.emplace_back(s.frame.coeffs, ridge_target(s.target));
    mappers::save_model(mappers::ridge_fit(samples, st->lambda), st->out);
  });
}

void add_eval(CLI::App& app) {
  auto* sub = app.add_subcommand("eval", "evaluate mapping methods against ground truth");
  sub->option_defaults()->always_capture_default();
  struct S {
    std::string methods = "matrix,linear,epm";
    std::string data, model, out, manifest, epm, ridge, matrix;
    std::uint64_t model_seed = kDefaultSeed;
    int model_v = 800;
  };
  auto st = std::make_shared<S>();
  opt(sub, "methods", st->methods, "comma-separated subset of matrix,linear,epm");
  opt(sub, "data", st->data, "test JSONL (with targets)")->required();
  opt(sub, "model", st->model, "head model file (else a seeded family is used)");
  opt(sub, "model-seed", st->model_seed, "seed for the generated model family");
  opt(sub, "model-v", st->model_v, "vertex count for the generated model family");
  opt(sub, "epm", st->epm, "mapper model file (required for method epm)");
  opt(sub, "ridge", st->ridge, "ridge mapper file (required for method linear)");
  opt(sub, "matrix", st->matrix, "matrix mapper file (required for method matrix)");
  opt(sub, "out", st->out, "output report JSON (a .md table is written next to it)")
      ->required();
  opt(sub, "manifest", st->manifest, "coefficient ordering manifest");
  sub->callback([sub, st] {
    log_resolved_config(sub);
    auto test = load_required(st->data, st->manifest, true);

    std::unique_ptr<metrics::ModelProvider> provider;
    if (!st->model.empty())
      provider = std::make_unique<metrics::FixedModelProvider>(flame::load_model(st->model));
    else
      provider = std::make_unique<metrics::SynthFamily>(st->model_seed, st->model_v);

    mappers::MatrixMapper matrix_mapper;
    mappers::RidgeMapper ridge_mapper;
    mappers::EpmModel epm_model;
    std::vector<metrics::NamedMapper> methods;
    std::stringstream names(st->methods);
    std::string name;
    while (std::getline(names, name, ',')) {
      if (name == "matrix") {
        if (st->matrix.empty()) throw Error("missing-input", "method matrix needs --matrix");
        matrix_mapper = mappers::load_matrix_mapper(st->matrix);
        methods.push_back(metrics::make_matrix_mapper(matrix_mapper));
      } else if (name == "linear") {
        if (st->ridge.empty()) throw Error("missing-input", "method linear needs --ridge");
        ridge_mapper = mappers::load_ridge_mapper(st->ridge);
        methods.push_back(metrics::make_ridge_mapper(ridge_mapper));
      } else if (name == "epm") {
        if (st->epm.empty()) throw Error("missing-input", "method epm needs --epm");
        epm_model = mappers::load_epm(st->epm);
        methods.push_back(metrics::make_epm_mapper(epm_model));
      } else {
        throw Error("bad-input", "unknown method '" + name + "'");
      }
    }
    auto report = metrics::evaluate_methods(methods, test.samples, *provider, st->data);
    write_text(st->out, report.to_json());
    const auto dot = st->out.find_last_of('.');
    write_text((dot == std::string::npos ? st->out : st->out.substr(0, dot)) + ".md",
               report.to_markdown());
    std::cout << report.to_markdown();
  });
}

void add_mia_fit(CLI::App& app) {
  auto* sub = app.add_subcommand("mia-fit", "fit avatar offsets against the mapper output");
  sub->option_defaults()->always_capture_default();
  struct S {
    std::string model, cloud, epm, frames, holdout, out, report, manifest;
    mia::MiaConfig config;
  };
  auto st = std::make_shared<S>();
  st->config.seed = kDefaultSeed;
  opt(sub, "model", st->model, "head model file")->required();
  opt(sub, "cloud", st->cloud, "Gaussian cloud file")->required();
  opt(sub, "epm", st->epm, "mapper model file")->required();
  opt(sub, "frames", st->frames, "fit JSONL (with targets)")->required();
  opt(sub, "holdout", st->holdout, "held-out JSONL for generalization reporting");
  opt(sub, "out", st->out, "output offsets file")->required();
  opt(sub, "report", st->report, "write the fit report JSON here");
  opt(sub, "iterations", st->config.iterations, "optimizer iterations");
  opt(sub, "lr", st->config.lr, "optimizer learning rate");
  opt(sub, "lambda-lap", st->config.lambda_lap, "Laplacian smoothing weight");
  opt(sub, "lambda-reg", st->config.lambda_reg, "parameter regularizer weight");
  opt(sub, "lambda-scale", st->config.lambda_scale, "anisotropy penalty weight");
  opt(sub, "seed", st->config.seed, "seed recorded in the report");
  sub->callback([sub, st] {
    log_resolved_config(sub);
    auto model = flame::load_model(st->model);
    auto cloud = rig::load_cloud(st->cloud);
    auto epm = mappers::load_epm(st->epm);
    auto frames = load_required(st->frames, st->manifest, true);
    std::vector<data::PairedSample> holdout;
    if (!st->holdout.empty())
      holdout = load_required(st->holdout, st->manifest, true).samples;
    auto [offsets, report] =
        mia::mia_fit(model, cloud, mia::epm_predictor(epm), frames.samples, st->config,
                     st->holdout.empty() ? nullptr : &holdout);
    if (report.diverged) throw Error("divergence", "fit loss became non-finite");
    mia::save_offsets(offsets, st->out);
    if (!st->report.empty()) write_text(st->report, report.to_json());
    nlohmann::ordered_json j{{"pre_train_rmse_mm", report.pre_train_rmse_mm},
                             {"post_train_rmse_mm", report.post_train_rmse_mm}};
    std::cout << j.dump() << "\n";
  });
}

void add_serve(CLI::App& app) {
  auto* sub = app.add_subcommand("serve", "run the streaming pipeline server");
  sub->option_defaults()->always_capture_default();
  struct S {
    std::string listen = "127.0.0.1";
    int port = 7070;
    std::string bda, epm, model, cloud, offsets;
  };
  auto st = std::make_shared<S>();
  opt(sub, "listen", st->listen, "listen address");
  opt(sub, "port", st->port, "listen port");
  opt(sub, "bda", st->bda, "alignment file")->required();
  opt(sub, "epm", st->epm, "mapper model file")->required();
  opt(sub, "model", st->model, "head model file")->required();
  opt(sub, "cloud", st->cloud, "Gaussian cloud file")->required();
  opt(sub, "offsets", st->offsets, "avatar offsets file (optional)");
  sub->callback([sub, st] {
    log_resolved_config(sub);
    auto assets =
        stream::PipelineAssets::load(st->bda, st->epm, st->model, st->cloud, st->offsets);
    stream::ServerConfig config;
    config.listen_address = st->listen;
    config.port = std::uint16_t(st->port);
    stream::Server server(std::move(assets), config);
    g_server.store(&server);
    std::signal(SIGINT, [](int) {
      if (auto* s = g_server.load()) s->stop();
    });
    std::signal(SIGTERM, [](int) {
      if (auto* s = g_server.load()) s->stop();
    });
    std::cerr << "listening on " << st->listen << ":" << server.port() << "\n";
    server.run();
    g_server.store(nullptr);
  });
}

void add_replay(CLI::App& app) {
  auto* sub = app.add_subcommand("replay", "stream a trace and measure round-trip latency");
  sub->option_defaults()->always_capture_default();
  struct S {
    std::string trace, endpoint = "127.0.0.1:7070", manifest;
    double rate = 60.0;
  };
  auto st = std::make_shared<S>();
  opt(sub, "trace", st->trace, "trace JSONL")->required();
  opt(sub, "endpoint", st->endpoint, "server host:port");
  opt(sub, "rate", st->rate, "send rate in Hz");
  opt(sub, "manifest", st->manifest, "coefficient ordering manifest");
  sub->callback([sub, st] {
    log_resolved_config(sub);
    auto trace = load_required(st->trace, st->manifest, false);
    std::vector<data::BlendshapeFrame> frames;
    frames.reserve(trace.samples.size());
    for (auto& s : trace.samples) frames.push_back(s.frame);
    auto [host, port] = parse_endpoint(st->endpoint);
    stream::ReplayOptions options;
    options.rate_hz = st->rate;
    auto report = stream::replay(frames, host, port, options);
    std::cout << report.to_json() << "\n";
  });
}

void add_export_heatmap(CLI::App& app) {
  auto* sub = app.add_subcommand("export-heatmap", "write a per-vertex error heatmap PLY");
  sub->option_defaults()->always_capture_default();
  struct S {
    std::string model, data, epm, out, manifest;
    std::size_t index = 0;
  };
  auto st = std::make_shared<S>();
  opt(sub, "model", st->model, "head model file")->required();
  opt(sub, "data", st->data, "JSONL with targets")->required();
  opt(sub, "epm", st->epm, "mapper model file")->required();
  opt(sub, "index", st->index, "frame index within the data file");
  opt(sub, "out", st->out, "output PLY path (CSV written next to it)")->required();
  opt(sub, "manifest", st->manifest, "coefficient ordering manifest");
  sub->callback([sub, st] {
    log_resolved_config(sub);
    auto model = flame::load_model(st->model);
    auto samples = load_required(st->data, st->manifest, true).samples;
    if (st->index >= samples.size())
      throw Error("bad-input", "frame index out of range");
    auto epm = mappers::load_epm(st->epm);
    const auto& sample = samples[st->index];
    const flame::Mesh gt = flame::deform(model, sample.target);
    const flame::Mesh pred =
        flame::deform(model, mappers::epm_forward(epm, sample.frame.coeffs));
    metrics::heatmap_export(gt, metrics::per_vertex_error_mm(pred, gt), st->out);
  });
}

void add_grad_check(CLI::App& app) {
  auto* sub = app.add_subcommand("grad-check", "finite-difference check of mapper gradients");
  sub->option_defaults()->always_capture_default();
  struct S {
    std::uint64_t seed = kDefaultSeed;
    int params = 200;
    double tolerance = 1e-3;
  };
  auto st = std::make_shared<S>();
  opt(sub, "seed", st->seed, "model/batch seed");
  opt(sub, "params", st->params, "number of sampled parameters");
  opt(sub, "tolerance", st->tolerance, "maximum acceptable relative error");
  sub->callback([sub, st] {
    log_resolved_config(sub);
    const double err = mappers::epm_grad_check(nn::EpmConfig{}, st->seed, st->params);
    nlohmann::ordered_json j{{"max_rel_error", err}, {"tolerance", st->tolerance}};
    std::cout << j.dump() << "\n";
    if (err >= st->tolerance)
      throw Error("check-failed", "gradient error " + std::to_string(err) + " above tolerance");
  });
}

}  // namespace

std::unique_ptr<CLI::App> build_app() {
  auto app = std::make_unique<CLI::App>("blendshape-to-avatar expression mapping toolkit",
                                        "exmap");
  app->require_subcommand(1);
  app->set_config("--config", "", "read flags from a TOML/INI config file");
  add_synth_data(*app);
  add_fit_bda(*app);
  add_train_epm(*app);
  add_fit_ridge(*app);
  add_eval(*app);
  add_mia_fit(*app);
  add_serve(*app);
  add_replay(*app);
  add_export_heatmap(*app);
  add_grad_check(*app);
  return app;
}

int run_cli(int argc, const char* const* argv) {
  auto app = build_app();
  try {
    app->parse(argc, argv);
    return 0;
  } catch (const CLI::CallForHelp& e) {
    return app->exit(e);
  } catch (const CLI::RequiredError& e) {
    std::cerr << "error: missing-input: " << e.what() << "\n";
    return 2;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.cls() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace exmap::cli
