#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "stressvit/data.hpp"

namespace stressvit::cli {

namespace fs = std::filesystem;

struct SynthCommand {
  fs::path out;
  std::size_t images = 8;
  std::uint64_t seed = 0;
  std::size_t healthy = 5;
  std::size_t stressed = 5;
  std::size_t size = 160;
  AnnotationFormat format = AnnotationFormat::voc_xml;
};

struct TrainCommand {
  fs::path scenario;
  fs::path data = "data";
  fs::path out = "runs/train";
  std::optional<fs::path> init;
  double val_fraction = 0.1;
  std::optional<std::uint64_t> seed;  // overrides the scenario seed
};

struct EvalCommand {
  fs::path checkpoint;
  fs::path data;
  fs::path out;
  double threshold = 0.5;
};

struct ExtractFeaturesCommand {
  fs::path checkpoint;
  fs::path data;
  fs::path out;
};

struct SvmOptions {
  double C = 1.0;
  std::string kernel = "rbf";
  std::optional<double> gamma;  // "scale" heuristic when unset
  double tol = 1e-3;
};

struct SvmTrainCommand {
  fs::path features;
  fs::path out;
  SvmOptions svm;
};

struct SvmEvalCommand {
  fs::path model;
  fs::path features;
  fs::path out;
};

struct AttnCommand {
  fs::path checkpoint;
  fs::path image;
  fs::path out;
  double alpha = 0.5;
};

struct KfoldCommand {
  std::string pipeline;  // "svm" | "vit"
  std::optional<fs::path> data;
  std::optional<fs::path> features;
  std::optional<fs::path> checkpoint;
  std::optional<fs::path> scenario;
  fs::path out;
  std::size_t k = 5;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
  SvmOptions svm;
};

using Command = std::variant<SynthCommand, TrainCommand, EvalCommand, ExtractFeaturesCommand, SvmTrainCommand,
                             SvmEvalCommand, AttnCommand, KfoldCommand>;

// Bad invocation. exit_code is 2, or 0 for an explicit --help.
class UsageError : public std::runtime_error {
 public:
  UsageError(const std::string& what, int exit_code = 2) : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const { return exit_code_; }

 private:
  int exit_code_;
};

// args excludes the program name.
Command parse_cli(const std::vector<std::string>& args);

// STRESSVIT_SEED when set, else 0.
std::uint64_t default_seed();

struct RunResult {
  int exit_code = 0;
  nlohmann::json manifest;
};

// Executes a command and writes its manifest next to its outputs.
RunResult run_command(const Command& command);

// Entry point shared by the executable: usage errors exit 2, failures print a
// JSON error object on stderr and exit 1.
int main_entry(int argc, const char* const* argv);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hash_hex(std::uint64_t h);

}  // namespace stressvit::cli
