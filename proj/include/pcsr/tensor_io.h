// Copyright 2026 The PCSR Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Binary formats.
//
// Tensor container (little-endian):
//   "PCSR" | u8 version = 0x01 | u8 dtype = 0x00 (f32) | u8 rank |
//   rank x u32 dims | row-major f32 payload
//
// Checkpoint:
//   "PCKP" | u8 version = 0x01 | u32 entry count |
//   entries of { u16 name length | UTF-8 name | tensor container }

#ifndef PCSR_TENSOR_IO_H_
#define PCSR_TENSOR_IO_H_

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "pcsr/tensor.h"

namespace pcsr {

inline constexpr char kTensorMagic[4] = {'P', 'C', 'S', 'R'};
inline constexpr char kCheckpointMagic[4] = {'P', 'C', 'K', 'P'};
inline constexpr std::uint8_t kFormatVersion = 0x01;
inline constexpr std::uint8_t kDtypeF32 = 0x00;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

std::vector<std::uint8_t> EncodeTensor(const Tensor& t);
// Decodes one container starting at `*offset` and advances it.
Tensor DecodeTensor(const std::vector<std::uint8_t>& bytes, size_t* offset);

void WriteTensorFile(const std::string& path, const Tensor& t);
Tensor ReadTensorFile(const std::string& path);

std::vector<std::uint8_t> EncodeCheckpoint(const NamedTensors& entries);
NamedTensors DecodeCheckpoint(const std::vector<std::uint8_t>& bytes);

void WriteCheckpointFile(const std::string& path, const NamedTensors& entries);
NamedTensors ReadCheckpointFile(const std::string& path);

std::vector<std::uint8_t> ReadFileBytes(const std::string& path);
void WriteFileBytes(const std::string& path,
                    const std::vector<std::uint8_t>& bytes);
std::string ReadTextFile(const std::string& path);
void WriteTextFile(const std::string& path, const std::string& text);

}  // namespace pcsr

#endif  // PCSR_TENSOR_IO_H_
