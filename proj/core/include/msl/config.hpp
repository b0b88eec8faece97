#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "msl/data.hpp"
#include "msl/masking.hpp"
#include "msl/model.hpp"
#include "msl/training.hpp"

namespace msl {

// Raised for bad user input (unknown keys, malformed values); the CLI maps
// it to exit code 2.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// JSON document with sections {dataset, masks, model, train, eval}. A file
// is merged over the defaults, then --section.key=value overrides are
// applied. Unknown keys are rejected at every level.
class RunConfig {
 public:
  RunConfig();  // defaults

  static std::string default_json();

  void merge_file(const std::filesystem::path& path);
  // override of the form "section.key=value"; value parsed as JSON when
  // possible, as a string otherwise
  void apply_override(const std::string& assignment);

  std::string resolved(int indent = 2) const;

  // typed views (validated on access)
  DatasetGenParams dataset_params() const;
  int dataset_n_train() const;
  int dataset_n_test() const;

  MaskGenParams mask_gen_params() const;
  int masks_count_per_subset() const;
  int masks_height() const;
  int masks_width() const;
  uint64_t masks_seed() const;

  ArchDescriptor arch() const;
  TrainConfig train_config() const;

  std::vector<uint64_t> eval_seeds() const;
  std::string eval_mask_subset() const;

  std::string get_string(const std::string& dotted) const;
  double get_double(const std::string& dotted) const;
  int get_int(const std::string& dotted) const;

 private:
  std::string json_text_;  // current resolved document
};

// Resolve an output directory: absolute paths pass through, relative paths
// land under $MSL_RUN_ROOT (default "runs").
std::filesystem::path resolve_run_dir(const std::string& out);

// Refuses to reuse an existing directory unless force is set; creates it.
void prepare_run_dir(const std::filesystem::path& dir, bool force);

}  // namespace msl
