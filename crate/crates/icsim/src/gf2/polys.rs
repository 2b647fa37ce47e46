pub(crate) const REDUCTION_POLYS: [u128; 128] = [
    0x1, 0x3, 0x3, 0x3,
    0x5, 0x3, 0x3, 0x1b,
    0x3, 0x9, 0x5, 0x9,
    0x1b, 0x21, 0x3, 0x2b,
    0x9, 0x9, 0x27, 0x9,
    0x5, 0x3, 0x21, 0x1b,
    0x9, 0x1b, 0x27, 0x3,
    0x5, 0x3, 0x9, 0x8d,
    0x4b, 0x1b, 0x5, 0x35,
    0x3f, 0x63, 0x11, 0x39,
    0x9, 0x27, 0x59, 0x21,
    0x1b, 0x3, 0x21, 0x2d,
    0x71, 0x1d, 0x4b, 0x9,
    0x47, 0x7d, 0x47, 0x95,
    0x11, 0x63, 0x7b, 0x3,
    0x27, 0x69, 0x3, 0x1b,
    0x1b, 0x9, 0x27, 0xa3,
    0x65, 0x2b, 0x2b, 0x5f,
    0x1d, 0x47, 0x4b, 0x35,
    0x65, 0x5f, 0x1d, 0xaf,
    0x11, 0xd7, 0x95, 0x21,
    0x107, 0x65, 0xa3, 0x3f,
    0x69, 0x2d, 0xed, 0x65,
    0x5, 0x63, 0x77, 0x6f,
    0x41, 0x99, 0x4b, 0x65,
    0xc3, 0x69, 0xbd, 0x1b,
    0x11, 0x63, 0xaf, 0x53,
    0x35, 0x53, 0x95, 0x39,
    0x2d, 0x2d, 0xaf, 0x17,
    0x27, 0x65, 0x101, 0x1b,
    0x123, 0x47, 0x5, 0x7d,
    0xaf, 0x95, 0x3, 0x87,
];
