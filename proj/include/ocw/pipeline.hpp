#pragma once

#include <json.hpp>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ocw/autobit.hpp"
#include "ocw/binfact.hpp"
#include "ocw/calib.hpp"
#include "ocw/container.hpp"
#include "ocw/layerwise.hpp"
#include "ocw/metrics.hpp"
#include "ocw/model.hpp"

namespace ocw {

struct InspectReport {
  LayerGraph graph;
  size_t total_params = 0;
  size_t quantizable_params = 0;
  size_t fp16_equivalent_bytes = 0;  // 2 bytes per parameter
  std::string text() const;
};

InspectReport inspect_model(const ToyModel& m);

// ---- layer-wise sweep -------------------------------------------------

enum class WeightFormat { uniform, dbf, mdbf };

WeightFormat weight_format_from_name(const std::string& name);

struct PreprocessSettings {
  std::optional<float> smooth_alpha;
  RotationKind rotation = RotationKind::identity;
  std::optional<BalanceNorm> balance;
  uint64_t seed = 0;
};

struct SweepOptions {
  WeightFormat format = WeightFormat::uniform;

  // uniform format
  LayerQuantOptions base;           // default per-layer options
  std::optional<Plan> plan;         // per-module config override
  bool passthrough = false;         // keep weights in float (16-bit plan)

  // binary-factor formats
  double bpw = 1.5;
  size_t env_rank = 2;
  int binfact_outer = 30;
  int binfact_inner = 2;

  int lpcd_iters = 0;               // per-block coordinate descent after quantization
  PreprocessSettings preprocess;
};

// Per-layer state of a quantized model: the encoded weights plus everything
// a refiner needs to keep improving them.
struct QuantizedModelState {
  ToyModel model;  // dense weights installed (the deployable pivot)
  std::map<std::string, QuantizedMatrix> uniform;
  std::map<std::string, DbfMatrix> dbf;
  std::map<std::string, MdbfMatrix> mdbf;
  std::map<std::string, PreTransform> pre;          // per-layer preprocess transforms
  std::map<std::string, Matrix> targets;            // quantization targets (transformed space)
  std::map<std::string, LowRankCorrection> lowrank; // residual corrections, if fitted
  std::map<std::string, double> layer_objective;    // ||Xhat What - X W||_F^2 per layer
  std::vector<std::string> passthrough;

  OcwContainer to_container() const;
};

// Sequential dual-model sweep: forwards the calibration set through the
// full-precision and the incrementally quantized model, accumulates the
// Gram and error-propagation statistics per layer, quantizes, installs, and
// optionally runs the per-block submodule coordinate descent.
QuantizedModelState run_layerwise_sweep(const ToyModel& fp_model, const CalibSet& calib,
                                        const SweepOptions& opts);

QuantizedModelState state_from_container(const OcwContainer& c);

// ---- evaluation -------------------------------------------------------

struct FidelityReport {
  double kl = 0.0;
  std::vector<double> hidden_cosine;
  double hidden_cosine_mean = 0.0;
  double entropy = 0.0;
  double nll = 0.0;
  std::map<std::string, double> layer_recon;

  nlohmann::json to_json() const;
  std::string text() const;
};

FidelityReport evaluate_fidelity(const ToyModel& teacher, const ToyModel& student,
                                 const CalibSet& eval_set);

// ---- refiners ----------------------------------------------------------

struct RefinerSpec {
  std::string name;  // jointq | lpcd | lowrank | binfact-refine
  nlohmann::json params;
};

struct StageTrace {
  std::string stage;
  FidelityReport report;
};

struct RefineResult {
  QuantizedModelState state;
  std::vector<StageTrace> trace;  // pivot first, then one entry per refiner
};

// Applies each refiner in order, recording fidelity after every stage.
RefineResult run_refiners(const ToyModel& fp_model, QuantizedModelState pivot,
                          const CalibSet& calib, const std::vector<RefinerSpec>& refiners,
                          const CalibSet& eval_set);

std::string stage_table_csv(const std::vector<StageTrace>& trace);

// ---- config-driven end-to-end run ---------------------------------------

struct PipelineConfig {
  uint64_t seed = 1;
  nlohmann::json raw;

  static PipelineConfig from_json(const nlohmann::json& j);
  static PipelineConfig from_file(const std::string& path);
};

struct RunResult {
  InspectReport inspect;
  RefineResult refined;
  std::string output_path;
};

// Full default path: inspect -> calib -> plan -> quantize -> refine ->
// eval -> save, driven by one JSON config.
RunResult run_pipeline(const PipelineConfig& config);

// plan file I/O
nlohmann::json plan_to_json(const Plan& plan, size_t budget_bytes);
Plan plan_from_json(const nlohmann::json& j);

}  // namespace ocw
