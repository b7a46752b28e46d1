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

#include "pcsr/tensor_io.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "pcsr/error.h"

namespace pcsr {
namespace {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

void PutU16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void PutU32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
  }
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, size_t* offset)
      : bytes_(bytes), pos_(offset) {}

  void Need(size_t n, const char* field) const {
    if (*pos_ + n > bytes_.size()) {
      throw FormatError(std::string("truncated input while reading ") + field);
    }
  }
  std::uint8_t U8(const char* field) {
    Need(1, field);
    return bytes_[(*pos_)++];
  }
  std::uint16_t U16(const char* field) {
    Need(2, field);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[*pos_] |
                                                 (bytes_[*pos_ + 1] << 8));
    *pos_ += 2;
    return v;
  }
  std::uint32_t U32(const char* field) {
    Need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(bytes_[*pos_ + i]) << (8 * i);
    }
    *pos_ += 4;
    return v;
  }
  void Bytes(void* dst, size_t n, const char* field) {
    Need(n, field);
    std::memcpy(dst, bytes_.data() + *pos_, n);
    *pos_ += n;
  }
  void Magic(const char (&expected)[4], const char* field) {
    char got[4];
    Bytes(got, 4, field);
    if (std::memcmp(got, expected, 4) != 0) {
      throw FormatError(std::string("bad magic in ") + field);
    }
  }
  size_t pos() const { return *pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  size_t* pos_;
};

}  // namespace

std::vector<std::uint8_t> EncodeTensor(const Tensor& t) {
  if (t.rank() > 255) throw FormatError("tensor rank exceeds 255");
  std::vector<std::uint8_t> out(kTensorMagic, kTensorMagic + 4);
  out.push_back(kFormatVersion);
  out.push_back(kDtypeF32);
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.dims()) {
    if (d > std::numeric_limits<std::uint32_t>::max()) {
      throw FormatError("tensor dim exceeds u32");
    }
    PutU32(out, static_cast<std::uint32_t>(d));
  }
  const size_t header = out.size();
  out.resize(header + static_cast<size_t>(t.numel()) * sizeof(float));
  std::memcpy(out.data() + header, t.raw(),
              static_cast<size_t>(t.numel()) * sizeof(float));
  return out;
}

Tensor DecodeTensor(const std::vector<std::uint8_t>& bytes, size_t* offset) {
  Reader r(bytes, offset);
  r.Magic(kTensorMagic, "tensor magic");
  const auto version = r.U8("tensor version");
  if (version != kFormatVersion) {
    throw FormatError("unsupported tensor version " + std::to_string(version));
  }
  const auto dtype = r.U8("tensor dtype");
  if (dtype != kDtypeF32) {
    throw FormatError("unsupported tensor dtype " + std::to_string(dtype));
  }
  const auto rank = r.U8("tensor rank");
  Shape dims;
  for (int i = 0; i < rank; ++i) {
    const auto d = r.U32("tensor dims");
    if (d == 0) throw FormatError("tensor dims: zero-length axis");
    dims.push_back(d);
  }
  const auto n = static_cast<size_t>(NumElements(dims));
  r.Need(n * sizeof(float), "tensor payload");
  std::vector<float> data(n);
  r.Bytes(data.data(), n * sizeof(float), "tensor payload");
  return Tensor(std::move(dims), std::move(data));
}

std::vector<std::uint8_t> ReadFileBytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

void WriteFileBytes(const std::string& path,
                    const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

void WriteTensorFile(const std::string& path, const Tensor& t) {
  WriteFileBytes(path, EncodeTensor(t));
}

Tensor ReadTensorFile(const std::string& path) {
  const auto bytes = ReadFileBytes(path);
  size_t offset = 0;
  Tensor t = DecodeTensor(bytes, &offset);
  if (offset != bytes.size()) {
    throw FormatError(path + ": trailing bytes after tensor payload");
  }
  return t;
}

std::vector<std::uint8_t> EncodeCheckpoint(const NamedTensors& entries) {
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  out.push_back(kFormatVersion);
  PutU32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw FormatError("checkpoint entry name too long: " + name);
    }
    PutU16(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    const auto blob = EncodeTensor(tensor);
    out.insert(out.end(), blob.begin(), blob.end());
  }
  return out;
}

NamedTensors DecodeCheckpoint(const std::vector<std::uint8_t>& bytes) {
  size_t offset = 0;
  Reader r(bytes, &offset);
  r.Magic(kCheckpointMagic, "checkpoint magic");
  const auto version = r.U8("checkpoint version");
  if (version != kFormatVersion) {
    throw FormatError("unsupported checkpoint version " +
                      std::to_string(version));
  }
  const auto count = r.U32("checkpoint entry count");
  NamedTensors entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.U16("entry name length");
    std::string name(len, '\0');
    r.Bytes(name.data(), len, "entry name");
    try {
      entries.emplace_back(name, DecodeTensor(bytes, &offset));
    } catch (const FormatError& e) {
      throw FormatError("entry '" + name + "': " + e.what());
    }
  }
  if (offset != bytes.size()) {
    throw FormatError("trailing bytes after checkpoint entries");
  }
  return entries;
}

void WriteCheckpointFile(const std::string& path, const NamedTensors& entries) {
  WriteFileBytes(path, EncodeCheckpoint(entries));
}

NamedTensors ReadCheckpointFile(const std::string& path) {
  return DecodeCheckpoint(ReadFileBytes(path));
}

std::string ReadTextFile(const std::string& path) {
  const auto bytes = ReadFileBytes(path);
  return std::string(bytes.begin(), bytes.end());
}

void WriteTextFile(const std::string& path, const std::string& text) {
  WriteFileBytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace pcsr
