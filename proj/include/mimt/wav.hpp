#pragma once

// RIFF/WAV ingestion and emission. Only 16-bit signed PCM mono is
// accepted; everything else is rejected with a diagnostic.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mimt/io.hpp"

namespace mimt {

inline constexpr int kSampleRate = 24000;

struct Waveform {
  std::vector<double> samples;  // mono, amplitudes in [-1, 1]
  int sample_rate = kSampleRate;

  size_t size() const { return samples.size(); }
  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate; }
};

namespace wav {

inline Waveform read(const std::string& path) {
  io::ByteReader r = io::ByteReader::from_file(path);
  if (r.remaining() < 12) throw std::runtime_error("not a WAV file (too short): " + path);
  if (r.str(4) != "RIFF") throw std::runtime_error("not a WAV file (missing RIFF): " + path);
  r.u32();  // riff chunk size
  if (r.str(4) != "WAVE") throw std::runtime_error("not a WAV file (missing WAVE): " + path);

  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  bool have_fmt = false;
  std::vector<uint8_t> pcm;

  while (r.remaining() >= 8) {
    std::string id = r.str(4);
    uint32_t sz = r.u32();
    if (sz > r.remaining()) throw std::runtime_error("corrupt WAV chunk: " + path);
    if (id == "fmt ") {
      if (sz < 16) throw std::runtime_error("corrupt fmt chunk: " + path);
      format = r.u16();
      channels = r.u16();
      rate = r.u32();
      r.u32();  // byte rate
      r.u16();  // block align
      bits = r.u16();
      r.skip(sz - 16);
      have_fmt = true;
    } else if (id == "data") {
      pcm.resize(sz);
      for (uint32_t i = 0; i < sz; ++i) pcm[i] = r.u8();
      if (sz & 1) r.skip(1);  // chunk padding
    } else {
      r.skip(sz + (sz & 1));
    }
  }

  if (!have_fmt) throw std::runtime_error("WAV missing fmt chunk: " + path);
  if (format != 1) throw std::runtime_error("unsupported WAV encoding (want PCM): " + path);
  if (bits != 16) throw std::runtime_error("unsupported WAV bit depth (want 16-bit): " + path);
  if (channels != 1) throw std::runtime_error("unsupported WAV channel count (want mono): " + path);
  if (rate == 0) throw std::runtime_error("invalid WAV sample rate: " + path);

  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  w.samples.resize(pcm.size() / 2);
  for (size_t i = 0; i < w.samples.size(); ++i) {
    int16_t s = static_cast<int16_t>(pcm[2 * i] | (pcm[2 * i + 1] << 8));
    w.samples[i] = static_cast<double>(s) / 32768.0;
  }
  return w;
}

inline void write(const std::string& path, const Waveform& w) {
  io::ByteWriter b;
  const uint32_t data_size = static_cast<uint32_t>(w.samples.size() * 2);
  b.str("RIFF");
  b.u32(36 + data_size);
  b.str("WAVE");
  b.str("fmt ");
  b.u32(16);
  b.u16(1);  // PCM
  b.u16(1);  // mono
  b.u32(static_cast<uint32_t>(w.sample_rate));
  b.u32(static_cast<uint32_t>(w.sample_rate * 2));
  b.u16(2);
  b.u16(16);
  b.str("data");
  b.u32(data_size);
  for (double s : w.samples) {
    double c = std::clamp(s, -1.0, 1.0);
    b.i16(static_cast<int16_t>(std::lround(c * 32767.0)));
  }
  b.save(path);
}

}  // namespace wav
}  // namespace mimt
