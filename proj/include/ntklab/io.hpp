/*
 * Copyright 2026 ntklab contributors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include "ntklab/training.hpp"

namespace ntklab {

// Checkpoint: "NTKF", u32 version, layout table, f64 parameter data, BN
// buffer arrays. Little-endian throughout.
void save_checkpoint(const ModelState<float>& state, const std::string& path);
ModelState<float> load_checkpoint(const ModelSpec& spec, BufferMode mode, const std::string& path);

// Kernel snapshot: "ENTK", u32 version=1, u32 N, u32 n_out, u8 flags (bit0:
// AL present), n_out full NxN blocks of f64, N probe ids (u32), N CL labels
// (u16), optional N AL labels (u16). Little-endian.
void save_kernel_snapshot(const ClassKernel& kernel, const std::string& path);
ClassKernel load_kernel_snapshot(const std::string& path);

// trace.csv, RFC-4180 style, '.' decimal, %.17g floats, fixed header.
extern const char kTraceHeader[];
void write_trace_csv(const MetricTrace& trace, const std::string& path);
MetricTrace read_trace_csv(const std::string& path);

}  // namespace ntklab
