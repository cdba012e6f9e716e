#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace stsn {

// IEEE CRC32 (polynomial 0xEDB88320, zlib-compatible).
std::uint32_t crc32(std::span<const unsigned char> bytes, std::uint32_t seed = 0);

// Little-endian primitives. The on-disk formats are defined little-endian
// regardless of host order.
void put_u16(std::ostream& os, std::uint16_t v);
void put_u32(std::ostream& os, std::uint32_t v);
void put_f32(std::ostream& os, float v);
void put_f64(std::ostream& os, double v);

std::uint16_t get_u16(std::istream& is);
std::uint32_t get_u32(std::istream& is);
float get_f32(std::istream& is);
double get_f64(std::istream& is);

// Byte-buffer variants used where a payload CRC is computed before writing.
void append_u16(std::vector<unsigned char>& buf, std::uint16_t v);
void append_u32(std::vector<unsigned char>& buf, std::uint32_t v);
void append_f32(std::vector<unsigned char>& buf, float v);
void append_f64(std::vector<unsigned char>& buf, double v);

}  // namespace stsn
