#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace flowgate {

// Exit codes of the `flowgate` binary.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

// Runs one invocation; args excludes the program name. Machine-readable
// results go to `out`, diagnostics and logs to `err`.
//
//   simulate --classes A,B --n N --out DIR
//   flow     --f1 IMG --f3 IMG [--annotations FILE] [--res N] [--iters N] --out X.flo
//   classify --seq DIR --head FILE [--mode dual|flow_only|rgb_only]
//   train    --data DIR --out head.json [--augment random_frame,multires,perspective]
//   eval     --suite NAME|all [--data DIR | --n N] [--out report.{json,txt,csv}]
//   serve    --head FILE [--port N]
//
// Every subcommand accepts --seed and --config FILE (JSON; flags win).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace flowgate
