#pragma once

#include "lorablend/age_schedule.hpp"
#include "lorablend/error.hpp"
#include "lorablend/fusion.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace lorablend::cli {

// Stable process exit statuses.
enum ExitCode : int {
    kOk = 0,
    kFailure = 1,
    kInputError = 2,
    kIncompatible = 3,
    kInvalidParameter = 4,
    kEmptyWork = 5,
};

int exit_code_for(Errc code);

struct InspectArgs {
    std::filesystem::path path;
    bool json = false;
};

struct FuseArgs {
    std::filesystem::path young;
    std::filesystem::path old;
    double alpha = 0.5;
    FusionMethod method = FusionMethod::Svd;
    std::filesystem::path out;
};

struct SweepArgs {
    std::filesystem::path young;
    std::filesystem::path old;
    std::vector<double> ages;
    AgeAnchors anchors;
    std::optional<std::filesystem::path> calibration;
    FusionMethod method = FusionMethod::Svd;
    std::filesystem::path out_dir;
};

struct PromptFuseArgs {
    std::filesystem::path young_emb;
    std::filesystem::path old_emb;
    double alpha = 0.5;
    std::filesystem::path out;
};

inline constexpr const char* kPromptTensor = "prompt_embedding";

struct BenchArgs {
    std::vector<std::size_t> sizes{256, 512, 1024};
    std::size_t rank = 16;
    std::size_t repeats = 3;
    std::uint64_t seed = 0;
    std::optional<std::filesystem::path> out; // stdout when empty
};

struct BenchRow {
    std::size_t size = 0;
    std::size_t rank = 0;
    double t_factorwise = 0.0; // seconds, median of repeats
    double t_fullref = 0.0;
    double speedup = 0.0;      // t_fullref / t_factorwise
    // Frobenius norms of the two fused deltas; timing-independent.
    double norm_factorwise = 0.0;
    double norm_fullref = 0.0;
};

struct BenchReport {
    std::vector<BenchRow> rows;
};

struct AttnDemoArgs {
    std::vector<double> gammas{0.1, 0.3, 0.5};
    std::vector<double> alphas{0.0, 0.25, 0.5, 0.75, 1.0};
    std::uint64_t seed = 0;
    FusionMethod method = FusionMethod::Svd;
    std::optional<std::filesystem::path> out;
};

// Each command reports errors on `err` and returns an ExitCode.
int cmd_inspect(const InspectArgs& args, std::ostream& out, std::ostream& err);
int cmd_fuse(const FuseArgs& args, std::ostream& out, std::ostream& err);
int cmd_sweep(const SweepArgs& args, std::ostream& out, std::ostream& err);
int cmd_prompt_fuse(const PromptFuseArgs& args, std::ostream& out, std::ostream& err);
int cmd_bench(const BenchArgs& args, std::ostream& out, std::ostream& err);
int cmd_attn_demo(const AttnDemoArgs& args, std::ostream& out, std::ostream& err);

// Library entry points behind cmd_bench; throw on invalid arguments.
BenchReport run_bench(const BenchArgs& args);
std::string bench_csv(const BenchReport& report);

// Full argument parsing and dispatch, as used by the `lorablend` binary.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace lorablend::cli
