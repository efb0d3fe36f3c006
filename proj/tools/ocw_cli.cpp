#include <CLI11.hpp>
#include <fstream>
#include <iostream>

#include "ocw/pipeline.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitIo = 2;
constexpr int kExitNumeric = 3;

using ocw::CalibSet;
using ocw::TokenCorpus;

struct CalibArgs {
  std::string corpus;
  std::string format = "bytes";
  std::string strategy = "concat_chunk";
  size_t n = 4;
  size_t T = 16;
  uint64_t seed = 1;
  size_t synth_len = 0;  // when nonzero, generate a synthetic corpus
};

void add_calib_options(CLI::App* cmd, CalibArgs& args) {
  cmd->add_option("--corpus", args.corpus, "token corpus file");
  cmd->add_option("--corpus-format", args.format, "bytes | u32");
  cmd->add_option("--strategy", args.strategy, "concat_chunk | drop_head | drop_rand");
  cmd->add_option("-n,--sequences", args.n, "number of calibration sequences");
  cmd->add_option("-T,--length", args.T, "tokens per sequence");
  cmd->add_option("--seed", args.seed, "sampling seed");
  cmd->add_option("--synthetic", args.synth_len, "generate a synthetic corpus of this length");
}

TokenCorpus load_corpus(const CalibArgs& args, size_t vocab) {
  if (args.synth_len) return TokenCorpus::synthetic(args.synth_len, vocab, args.seed);
  if (args.corpus.empty())
    throw ocw::invalid_input("no corpus given (use --corpus or --synthetic)");
  if (args.format == "bytes") return TokenCorpus::from_byte_file(args.corpus);
  if (args.format == "u32") return TokenCorpus::from_u32_file(args.corpus, vocab);
  throw ocw::invalid_input("unknown corpus format: " + args.format);
}

CalibSet make_calib(const CalibArgs& args, size_t vocab) {
  return sample_calib(load_corpus(args, vocab), ocw::calib_strategy_from_name(args.strategy),
                      args.n, args.T, args.seed);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ocw::io_error("cannot open for writing: " + path);
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ocw: desk-scale weight quantization workbench"};
  app.require_subcommand(1);

  // ---- inspect ----
  std::string inspect_model_path;
  auto* inspect = app.add_subcommand("inspect", "enumerate quantizable modules of a model");
  inspect->add_option("model", inspect_model_path, "OCW model file")->required();

  // ---- export ----
  std::string export_out;
  uint64_t export_seed = 7;
  nlohmann::json export_cfg = nlohmann::json::object();
  std::string export_cfg_str;
  auto* exp = app.add_subcommand("export", "create or re-save a model container");
  exp->add_option("--out", export_out, "output OCW file")->required();
  exp->add_option("--seed", export_seed, "weight seed for a fresh toy model");
  exp->add_option("--config", export_cfg_str, "toy model config as JSON");
  std::string export_in;
  exp->add_option("--in", export_in, "existing OCW file to re-save");

  // ---- calib ----
  CalibArgs calib_args;
  std::string calib_out;
  auto* calib = app.add_subcommand("calib", "build and summarize a calibration set");
  add_calib_options(calib, calib_args);
  calib->add_option("--out", calib_out, "write sampled token ids (u32 binary)");
  std::string calib_model;
  calib->add_option("--model", calib_model, "model file (for the vocabulary size)");

  // ---- plan ----
  std::string plan_model, plan_out, plan_mode = "act", plan_solver = "dp";
  double plan_bpw = 4.16;
  CalibArgs plan_calib;
  auto* plan = app.add_subcommand("plan", "mixed-precision bit allocation");
  plan->add_option("--model", plan_model, "OCW model file")->required();
  plan->add_option("--bpw", plan_bpw, "target average bits per weight")->required();
  plan->add_option("--mode", plan_mode, "naive | act");
  plan->add_option("--solver", plan_solver, "exhaustive | dp | branch_bound");
  plan->add_option("--emit", plan_out, "plan output file (JSON)")->required();
  add_calib_options(plan, plan_calib);

  // ---- preprocess ----
  std::string pre_model, pre_out;
  double pre_alpha = -1.0;
  std::string pre_rotation = "none", pre_balance = "none";
  uint64_t pre_seed = 1;
  CalibArgs pre_calib;
  auto* pre = app.add_subcommand("preprocess", "report equivalence-preserving transforms");
  pre->add_option("--model", pre_model, "OCW model file")->required();
  pre->add_option("--smooth-alpha", pre_alpha, "channel scaling strength in [0,1]");
  pre->add_option("--rotation", pre_rotation, "none | random | hadamard");
  pre->add_option("--balance", pre_balance, "none | l1 | l2");
  pre->add_option("--seed", pre_seed, "rotation seed");
  pre->add_option("--emit", pre_out, "write the settings JSON consumed by quantize");
  add_calib_options(pre, pre_calib);

  // ---- quantize ----
  std::string q_model, q_out, q_method = "gptq", q_scheme = "symmetric", q_format = "uniform";
  std::string q_plan_path, q_pre_path;
  int q_bits = 4;
  size_t q_group = 0;
  bool q_actorder = false, q_mse = false, q_no_qep = false;
  double q_qep_alpha = 1.0, q_bpw = 1.5;
  size_t q_env_rank = 2;
  int q_lpcd = 0;
  CalibArgs q_calib;
  auto* quant = app.add_subcommand("quantize", "layer-wise quantization sweep");
  quant->add_option("--model", q_model, "OCW model file")->required();
  quant->add_option("--out", q_out, "output OCW file")->required();
  quant->add_option("--method", q_method, "rtn | gptq");
  quant->add_option("--format", q_format, "uniform | dbf | mdbf");
  quant->add_option("--bits", q_bits, "bit-width (uniform)");
  quant->add_option("--group-size", q_group, "group size; 0 = per-channel");
  quant->add_option("--scheme", q_scheme, "symmetric | asymmetric");
  quant->add_flag("--actorder", q_actorder, "process indices by descending Hessian diagonal");
  quant->add_flag("--mse-grid", q_mse, "MSE-based grid tuning");
  quant->add_flag("--no-qep", q_no_qep, "disable error-propagation target correction");
  quant->add_option("--qep-alpha", q_qep_alpha, "propagation strength in [0,1]");
  quant->add_option("--lpcd-iters", q_lpcd, "submodule coordinate-descent iterations");
  quant->add_option("--bpw", q_bpw, "bits per weight (dbf/mdbf)");
  quant->add_option("--envelope-rank", q_env_rank, "envelope rank (mdbf)");
  quant->add_option("--plan", q_plan_path, "mixed-precision plan JSON");
  quant->add_option("--preprocess", q_pre_path, "preprocess settings JSON");
  add_calib_options(quant, q_calib);

  // ---- refine ----
  std::string r_model, r_orig, r_out;
  bool r_jointq = false;
  double r_lambda = 0.2;
  int r_passes = 8, r_lpcd = 0, r_binfact = 0;
  size_t r_lowrank = 0;
  CalibArgs r_calib;
  auto* refine = app.add_subcommand("refine", "improve a quantized pivot in place");
  refine->add_option("--model", r_model, "quantized OCW file")->required();
  refine->add_option("--orig", r_orig, "full-precision OCW file")->required();
  refine->add_option("--out", r_out, "output OCW file")->required();
  refine->add_flag("--jointq", r_jointq, "joint scale-and-integer local search");
  refine->add_option("--lambda", r_lambda, "proximity regularizer weight");
  refine->add_option("--passes", r_passes, "local search passes");
  refine->add_option("--lpcd-iters", r_lpcd, "submodule coordinate-descent iterations");
  refine->add_option("--lowrank", r_lowrank, "low-rank residual correction rank");
  refine->add_option("--binfact-iters", r_binfact, "binary-factor refinement outer iterations");
  add_calib_options(refine, r_calib);

  // ---- eval ----
  std::string e_model, e_teacher, e_report, e_trace;
  CalibArgs e_calib;
  auto* eval = app.add_subcommand("eval", "fidelity metrics against a teacher model");
  eval->add_option("--model", e_model, "student OCW file")->required();
  eval->add_option("--teacher", e_teacher, "teacher OCW file")->required();
  eval->add_option("--emit", e_report, "write the report JSON");
  eval->add_option("--trace", e_trace, "write a stage/metric/value table (CSV)");
  add_calib_options(eval, e_calib);

  // ---- run ----
  std::string run_config;
  auto* run = app.add_subcommand("run", "full pipeline from one config file");
  run->add_option("config", run_config, "pipeline config JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*inspect) {
      ocw::ToyModel m = ocw::model_from_container(ocw::load_ocw(inspect_model_path));
      std::cout << ocw::inspect_model(m).text();
    } else if (*exp) {
      if (!export_in.empty()) {
        ocw::store_ocw(export_out, ocw::load_ocw(export_in));
      } else {
        ocw::ToyModelConfig cfg;
        if (!export_cfg_str.empty()) {
          nlohmann::json j = nlohmann::json::parse(export_cfg_str);
          cfg = ocw::model_config_from_json(j);
        }
        ocw::store_ocw(export_out, ocw::model_to_container(ocw::ToyModel::seeded(cfg, export_seed)));
      }
      std::cout << "wrote " << export_out << "\n";
    } else if (*calib) {
      size_t vocab = 256;
      if (!calib_model.empty())
        vocab = ocw::model_from_container(ocw::load_ocw(calib_model)).config.vocab;
      CalibSet set = make_calib(calib_args, vocab);
      std::cout << "strategy " << ocw::calib_strategy_name(set.strategy) << ", "
                << set.sequences.size() << " sequences of " << set.sequences[0].size()
                << " tokens\n";
      if (!calib_out.empty()) {
        std::ofstream out(calib_out, std::ios::binary);
        if (!out) throw ocw::io_error("cannot open for writing: " + calib_out);
        for (const auto& seq : set.sequences)
          for (int t : seq) {
            const uint32_t v = uint32_t(t);
            const char bytes[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff),
                                   char((v >> 24) & 0xff)};
            out.write(bytes, 4);
          }
      }
    } else if (*plan) {
      ocw::ToyModel m = ocw::model_from_container(ocw::load_ocw(plan_model));
      CalibSet set = make_calib(plan_calib, m.config.vocab);
      ocw::ErrorMode mode = ocw::error_mode_from_name(plan_mode);
      std::vector<ocw::ModuleCandidates> mods;
      for (const auto& l : m.layer_graph().layers) {
        ocw::ModuleCandidates mc;
        mc.layer_id = l.id;
        mc.params = l.rows * l.cols;
        std::vector<double> diag(l.rows, 1.0);
        if (mode == ocw::ErrorMode::act_aware) {
          ocw::Matrix x = collect_layer_inputs(m, set, l.id);
          for (size_t i = 0; i < l.rows; ++i) {
            double acc = 0.0;
            for (size_t t = 0; t < x.rows; ++t) acc += double(x.at(t, i)) * double(x.at(t, i));
            diag[i] = acc;
          }
        }
        mc.candidates = ocw::candidate_grid(m.weight(l.id), mode,
                                            mode == ocw::ErrorMode::act_aware ? &diag : nullptr);
        mods.push_back(std::move(mc));
      }
      const size_t budget = ocw::budget_from_bpw(m.layer_graph(), plan_bpw);
      ocw::Plan p =
          ocw::plan_assignment(mods, budget, ocw::plan_solver_from_name(plan_solver));
      write_text(plan_out, ocw::plan_to_json(p, budget).dump(2) + "\n");
      std::cout << "budget " << budget << " bytes";
      const std::string uni = ocw::uniform_equivalent(plan_bpw);
      if (!uni.empty()) std::cout << " (uniform equivalent: " << uni << ")";
      std::cout << ", plan cost " << p.total_cost << " bytes, predicted error " << p.total_err
                << ", achieved " << p.achieved_bpw << " bpw\n";
    } else if (*pre) {
      ocw::ToyModel m = ocw::model_from_container(ocw::load_ocw(pre_model));
      CalibSet set = make_calib(pre_calib, m.config.vocab);
      nlohmann::json settings = nlohmann::json::object();
      if (pre_alpha >= 0.0) settings["smooth_alpha"] = pre_alpha;
      settings["rotation"] = pre_rotation;
      settings["balance"] = pre_balance;
      settings["seed"] = pre_seed;
      // report per-layer incoherence before/after the configured rotation
      for (const auto& l : m.layer_graph().layers) {
        const ocw::Matrix& w = m.weight(l.id);
        const double mu0 = ocw::incoherence(w);
        double mu1 = mu0;
        if (pre_rotation != "none") {
          ocw::Rotation rot = pre_rotation == "hadamard"
                                  ? ocw::Rotation::hadamard(w.rows)
                                  : ocw::Rotation::random_orthogonal(w.rows, pre_seed);
          mu1 = ocw::incoherence(apply_rotation(w, rot, ocw::RotationSide::input));
        }
        std::cout << l.id << "  mu " << mu0 << " -> " << mu1 << "\n";
      }
      if (!pre_out.empty()) write_text(pre_out, settings.dump(2) + "\n");
      (void)set;
    } else if (*quant || *refine || *eval) {
      // these paths assemble a pipeline config and share run_pipeline
      if (*quant) {
        nlohmann::json cfg;
        cfg["seed"] = q_calib.seed;
        cfg["model"] = {{"path", q_model}};
        nlohmann::json cj = {{"strategy", q_calib.strategy},
                             {"n", q_calib.n},
                             {"T", q_calib.T},
                             {"seed", q_calib.seed}};
        if (q_calib.synth_len) cj["synthetic"] = {{"length", q_calib.synth_len}};
        else {
          cj["corpus"] = q_calib.corpus;
          cj["format"] = q_calib.format;
        }
        cfg["calib"] = cj;
        nlohmann::json qj = {{"method", q_method},    {"format", q_format},
                             {"actorder", q_actorder}, {"mse_grid", q_mse},
                             {"qep", !q_no_qep},       {"qep_alpha", q_qep_alpha},
                             {"lpcd_iters", q_lpcd},   {"bpw", q_bpw},
                             {"envelope_rank", q_env_rank}};
        cfg["quantize"] = qj;
        if (!q_plan_path.empty()) {
          cfg["plan"] = {{"path", q_plan_path}};
        } else {
          cfg["plan"] = {{"uniform",
                          {{"bits", q_bits}, {"scheme", q_scheme}, {"group_size", q_group}}}};
        }
        if (!q_pre_path.empty()) {
          std::ifstream in(q_pre_path);
          if (!in) throw ocw::io_error("cannot open preprocess settings: " + q_pre_path);
          nlohmann::json pj;
          in >> pj;
          cfg["preprocess"] = pj;
        }
        cfg["output"] = q_out;
        ocw::RunResult res = ocw::run_pipeline(ocw::PipelineConfig::from_json(cfg));
        std::cout << "pivot written to " << q_out << "\n"
                  << res.refined.trace.front().report.text();
      } else if (*refine) {
        ocw::ToyModel orig = ocw::model_from_container(ocw::load_ocw(r_orig));
        ocw::QuantizedModelState pivot = ocw::state_from_container(ocw::load_ocw(r_model));
        CalibSet set = make_calib(r_calib, orig.config.vocab);
        std::vector<ocw::RefinerSpec> refiners;
        if (r_jointq)
          refiners.push_back({"jointq", {{"lambda", r_lambda}, {"passes", r_passes}}});
        if (r_lpcd > 0) refiners.push_back({"lpcd", {{"iters", r_lpcd}}});
        if (r_lowrank > 0) refiners.push_back({"lowrank", {{"rank", r_lowrank}}});
        if (r_binfact > 0) refiners.push_back({"binfact-refine", {{"outer", r_binfact}}});
        ocw::RefineResult res = run_refiners(orig, std::move(pivot), set, refiners, set);
        ocw::store_ocw(r_out, res.state.to_container());
        std::cout << ocw::stage_table_csv(res.trace);
      } else {
        ocw::ToyModel teacher = ocw::model_from_container(ocw::load_ocw(e_teacher));
        ocw::ToyModel student = ocw::model_from_container(ocw::load_ocw(e_model));
        CalibSet set = make_calib(e_calib, teacher.config.vocab);
        ocw::FidelityReport rep = evaluate_fidelity(teacher, student, set);
        std::cout << rep.text();
        if (!e_report.empty()) write_text(e_report, rep.to_json().dump(2) + "\n");
        if (!e_trace.empty()) {
          std::vector<ocw::StageTrace> tr{{"eval", rep}};
          write_text(e_trace, ocw::stage_table_csv(tr));
        }
      }
    } else if (*run) {
      ocw::RunResult res = ocw::run_pipeline(ocw::PipelineConfig::from_file(run_config));
      std::cout << res.inspect.text();
      std::cout << ocw::stage_table_csv(res.refined.trace);
      if (!res.output_path.empty()) std::cout << "model written to " << res.output_path << "\n";
    }
  } catch (const ocw::invalid_input& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ocw::io_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ocw::numeric_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}
