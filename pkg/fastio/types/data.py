from typing import Union

PAGE_SIZE = 4096

# Guest-physical page number (gpa >> 12)
GpaPage = int
# Virtual or physical byte address
Address = int

PageData = Union[bytes, bytearray, memoryview]
